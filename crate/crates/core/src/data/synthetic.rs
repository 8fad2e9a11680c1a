//! Seeded planted-event corpora.
//!
//! Every class owns one random signature per modality. An annotated event
//! adds both signatures over its steps; a distractor adds the signature of a
//! random class to a single modality and is left unannotated, so only a
//! model that reads both streams can tell the two apart.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};

use super::{AnnotatedVideo, DatasetIndex, EventInstance, FeatureStreams, Modality, Subset, Taxonomy};

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub videos: SubsetCounts,
    /// Sequence length range in steps, inclusive.
    pub min_steps: usize,
    pub max_steps: usize,
    pub hop_s: f64,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub mean_events: f64,
    /// Event length range in steps, inclusive.
    pub min_event_steps: usize,
    pub max_event_steps: usize,
    /// Probability that an event after the first overlaps an existing one.
    pub overlap_prob: f64,
    /// Symmetric, non-negative class affinities used to pick the class of an
    /// overlapping event. Empty means uniform.
    pub co_occurrence: Vec<Vec<f64>>,
    /// Probability, per annotated event and per modality, of planting a
    /// distractor in that modality alone, i.e. the expected number of
    /// distractors each stream carries per event. Distractors never touch an
    /// event or distractor of their own class.
    pub distractor_rate: f64,
    pub noise_std: f64,
    pub signature_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 6,
            videos: SubsetCounts { train: 300, val: 60, test: 60 },
            min_steps: 40,
            max_steps: 64,
            hop_s: 0.32,
            audio_dim: 16,
            visual_dim: 16,
            mean_events: 2.5,
            min_event_steps: 4,
            max_event_steps: 24,
            overlap_prob: 0.3,
            co_occurrence: Vec::new(),
            distractor_rate: 0.2,
            noise_std: 0.5,
            signature_scale: 1.0,
            seed: 2023,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Generation(what.to_owned()));
        if self.classes == 0 {
            return bad("at least one class is required");
        }
        for (name, p) in [("overlap_prob", self.overlap_prob), ("distractor_rate", self.distractor_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Generation(format!("{name} = {p} is not a probability")));
            }
        }
        if self.min_steps == 0 || self.min_steps > self.max_steps {
            return bad("invalid sequence length range");
        }
        if self.min_event_steps == 0 || self.min_event_steps > self.max_event_steps || self.max_event_steps > self.min_steps {
            return bad("event length range must fit inside the shortest sequence");
        }
        if !(self.hop_s > 0.0) || self.audio_dim == 0 || self.visual_dim == 0 {
            return bad("hop and feature dims must be positive");
        }
        if !(self.noise_std >= 0.0) || !(self.mean_events >= 1.0) {
            return bad("noise must be non-negative and mean events at least 1");
        }
        if self.mean_events * self.min_event_steps as f64 > self.min_steps as f64 {
            return Err(Error::Generation(format!(
                "{} events of at least {} steps do not fit in {} steps",
                self.mean_events, self.min_event_steps, self.min_steps
            )));
        }
        if !self.co_occurrence.is_empty() {
            let c = self.classes;
            if self.co_occurrence.len() != c || self.co_occurrence.iter().any(|r| r.len() != c) {
                return bad("co-occurrence matrix must be C×C");
            }
            for i in 0..c {
                for j in 0..c {
                    let v = self.co_occurrence[i][j];
                    if !(v >= 0.0) || v != self.co_occurrence[j][i] {
                        return bad("co-occurrence matrix must be symmetric and non-negative");
                    }
                }
            }
        }
        Ok(())
    }
}

/// An unannotated single-modality signature injection.
#[derive(Debug, Clone, PartialEq)]
pub struct Distractor {
    pub label_id: usize,
    pub modality: Modality,
    pub start_step: usize,
    pub end_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub index: DatasetIndex,
    pub features: BTreeMap<String, FeatureStreams>,
    pub distractors: BTreeMap<String, Vec<Distractor>>,
    /// `[C, D_a]` and `[C, D_v]`.
    pub audio_signatures: Tensor<f32>,
    pub visual_signatures: Tensor<f32>,
}

impl SyntheticCorpus {
    /// Writes `annotations.json` plus one feature file per video and modality.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.index.save(&dir.join(ANNOTATION_FILE))?;
        for (id, s) in &self.features {
            s.write(dir, id)?;
        }
        Ok(())
    }
}

/// Half-open step interval.
#[derive(Debug, Clone, Copy)]
struct Span {
    label: usize,
    start: usize,
    end: usize,
}

impl Span {
    fn overlaps(&self, other: &Span, gap: usize) -> bool {
        self.start < other.end + gap && other.start < self.end + gap
    }
}

fn signatures(rng: &mut SeededRng, classes: usize, dim: usize, scale: f64) -> Tensor<f32> {
    let data = (0..classes * dim).map(|_| (rng.normal() * scale) as f32).collect();
    Tensor::new(vec![classes, dim], data).expect("shape")
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let root = SeededRng::new(spec.seed);
    let mut sig_rng = root.fork(1);
    let audio_sig = signatures(&mut sig_rng, spec.classes, spec.audio_dim, spec.signature_scale);
    let visual_sig = signatures(&mut sig_rng, spec.classes, spec.visual_dim, spec.signature_scale);

    let mut videos = Vec::new();
    let mut features = BTreeMap::new();
    let mut distractors = BTreeMap::new();
    let plan = [
        (Subset::Train, spec.videos.train),
        (Subset::Val, spec.videos.val),
        (Subset::Test, spec.videos.test),
    ];
    let mut serial = 0u64;
    for (subset, count) in plan {
        for i in 0..count {
            serial += 1;
            let mut rng = root.fork(1000 + serial);
            let id = format!("{}_{i:04}", subset.as_str());
            let (video, streams, distr) = generate_video(spec, &id, subset, &audio_sig, &visual_sig, &mut rng)?;
            features.insert(id.clone(), streams);
            distractors.insert(id, distr);
            videos.push(video);
        }
    }
    Ok(SyntheticCorpus {
        index: DatasetIndex::new(Taxonomy::numbered(spec.classes), videos)?,
        features,
        distractors,
        audio_signatures: audio_sig,
        visual_signatures: visual_sig,
    })
}

fn generate_video(
    spec: &SyntheticSpec,
    id: &str,
    subset: Subset,
    audio_sig: &Tensor<f32>,
    visual_sig: &Tensor<f32>,
    rng: &mut SeededRng,
) -> Result<(AnnotatedVideo, FeatureStreams, Vec<Distractor>)> {
    let t = rng.int(spec.min_steps, spec.max_steps);
    let hi = (2.0 * spec.mean_events - 1.0).round().max(1.0) as usize;
    let n_events = rng.int(1, hi);
    let c = spec.classes;
    let mut spans: Vec<Span> = Vec::new();
    let duration = |rng: &mut SeededRng| rng.int(spec.min_event_steps, spec.max_event_steps.min(t));

    for k in 0..n_events {
        if k > 0 && c > 1 && rng.bernoulli(spec.overlap_prob) {
            let anchor = spans[rng.int(0, spans.len() - 1)];
            let mut weights: Vec<f64> = if spec.co_occurrence.is_empty() {
                vec![1.0; c]
            } else {
                spec.co_occurrence[anchor.label].clone()
            };
            weights[anchor.label] = 0.0;
            if weights.iter().sum::<f64>() <= 0.0 {
                weights = (0..c).map(|j| if j == anchor.label { 0.0 } else { 1.0 }).collect();
            }
            let label = rng.weighted(&weights).expect("positive weights");
            for _ in 0..20 {
                let len = duration(rng);
                let lo = (anchor.start + 1).saturating_sub(len);
                let hi = (anchor.end - 1).min(t - len);
                if lo > hi {
                    continue;
                }
                let start = rng.int(lo, hi);
                let cand = Span { label, start, end: start + len };
                if spans.iter().all(|s| s.label != label || !s.overlaps(&cand, 1)) {
                    spans.push(cand);
                    break;
                }
            }
        } else {
            let label = rng.int(0, c - 1);
            for _ in 0..50 {
                let len = duration(rng);
                let start = rng.int(0, t - len);
                let cand = Span { label, start, end: start + len };
                if spans.iter().all(|s| !s.overlaps(&cand, 1)) {
                    spans.push(cand);
                    break;
                }
            }
        }
    }
    if spans.is_empty() {
        let len = duration(rng);
        let start = rng.int(0, t - len);
        spans.push(Span { label: rng.int(0, c - 1), start, end: start + len });
    }

    let mut distr = Vec::new();
    let mut occupied = spans.clone();
    for modality in std::iter::repeat_n([Modality::Audio, Modality::Visual], spans.len()).flatten() {
        if !rng.bernoulli(spec.distractor_rate) {
            continue;
        }
        let label = rng.int(0, c - 1);
        for _ in 0..50 {
            let len = duration(rng);
            let start = rng.int(0, t - len);
            let cand = Span { label, start, end: start + len };
            // Other classes may overlap freely, as annotated events do.
            if occupied.iter().all(|s| s.label != label || !s.overlaps(&cand, 1)) {
                occupied.push(cand);
                distr.push(Distractor { label_id: label, modality, start_step: start, end_step: start + len });
                break;
            }
        }
    }

    let (da, dv) = (spec.audio_dim, spec.visual_dim);
    let mut audio = vec![0f32; t * da];
    let mut visual = vec![0f32; t * dv];
    if spec.noise_std > 0.0 {
        for x in audio.iter_mut().chain(visual.iter_mut()) {
            *x = (rng.normal() * spec.noise_std) as f32;
        }
    }
    let plant = |buf: &mut [f32], sig: &Tensor<f32>, label: usize, start: usize, end: usize| {
        let d = sig.shape()[1];
        for step in start..end {
            for (x, &s) in buf[step * d..(step + 1) * d].iter_mut().zip(sig.row(label)) {
                *x += s;
            }
        }
    };
    for s in &spans {
        plant(&mut audio, audio_sig, s.label, s.start, s.end);
        plant(&mut visual, visual_sig, s.label, s.start, s.end);
    }
    for d in &distr {
        match d.modality {
            Modality::Audio => plant(&mut audio, audio_sig, d.label_id, d.start_step, d.end_step),
            Modality::Visual => plant(&mut visual, visual_sig, d.label_id, d.start_step, d.end_step),
        }
    }

    spans.sort_by_key(|s| (s.start, s.end, s.label));
    let hop = spec.hop_s;
    let video = AnnotatedVideo {
        id: id.to_owned(),
        duration_s: t as f64 * hop,
        subset,
        events: spans
            .iter()
            .map(|s| EventInstance {
                label_id: s.label,
                start_s: s.start as f64 * hop,
                end_s: s.end as f64 * hop,
            })
            .collect(),
    };
    let streams = FeatureStreams::new(
        Tensor::new(vec![t, da], audio)?,
        Tensor::new(vec![t, dv], visual)?,
        hop as f32,
        0.0,
    )?;
    Ok((video, streams, distr))
}
