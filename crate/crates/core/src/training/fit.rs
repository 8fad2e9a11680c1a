//! The optimization loop.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_features, pad_and_mask, DatasetIndex, EventInstance, FeatureStreams, Subset, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::eval::{ap_report, GroundTruth, DEFAULT_THRESHOLDS};
use crate::inference::{localize_video, Candidate, DecodeConfig};
use crate::model::{forward, input_from_streams, Model, ModelConfig};
use crate::numerics::{ParamStore, SeededRng, Session};

use super::loss::{breakdown, cls_divisor, loss_sums, weighted_loss};
use super::{assign_targets, learning_rate, Adam, PyramidGrid, TargetAssignment, TrainConfig};

/// One video ready for training or evaluation, padded to the model length.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub duration_s: f64,
    pub events: Vec<EventInstance>,
    pub streams: FeatureStreams,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        duration_s: f64,
        events: Vec<EventInstance>,
        streams: &FeatureStreams,
        max_len: usize,
    ) -> Result<Self> {
        Ok(Sample {
            id: id.into(),
            duration_s,
            events,
            streams: pad_and_mask(streams, max_len)?,
        })
    }

    pub fn grid(&self, cfg: &ModelConfig) -> PyramidGrid {
        PyramidGrid::new(
            cfg,
            self.streams.len(),
            self.streams.valid_len,
            self.streams.hop_s as f64,
            self.streams.offset_s as f64,
        )
    }

    pub fn ground_truth(&self) -> impl Iterator<Item = GroundTruth> + '_ {
        self.events.iter().map(|e| GroundTruth {
            video_id: self.id.clone(),
            start_s: e.start_s,
            end_s: e.end_s,
            label_id: e.label_id,
        })
    }
}

/// Reads the features of every video of `subset` from `dir`.
pub fn load_samples(index: &DatasetIndex, dir: &Path, subset: Subset, max_len: usize) -> Result<Vec<Sample>> {
    index
        .subset(subset)
        .map(|v| {
            let streams = load_features(&v.id, dir)?;
            Sample::new(v.id.clone(), v.duration_s, v.events.clone(), &streams, max_len)
        })
        .collect()
}

/// Samples of one subset of an in-memory synthetic corpus.
pub fn corpus_samples(corpus: &SyntheticCorpus, subset: Subset, max_len: usize) -> Result<Vec<Sample>> {
    corpus
        .index
        .subset(subset)
        .map(|v| {
            let streams = corpus
                .features
                .get(&v.id)
                .ok_or_else(|| Error::UnknownVideo(v.id.clone()))?;
            Sample::new(v.id.clone(), v.duration_s, v.events.clone(), streams, max_len)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    /// Mean batch loss.
    pub train_loss: f64,
    pub train_loss_median: f64,
    /// Mean normalized classification term.
    pub cls: f64,
    /// Mean normalized regression term.
    pub reg: f64,
    #[serde(rename = "val_avg_mAP")]
    pub val_avg_map: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the epoch with the best validation avg mAP (the last
    /// epoch when there is no validation data).
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub history: Vec<EpochMetrics>,
}

/// Candidates for every sample after decoding and Soft-NMS.
pub fn predict_samples(model: &Model, samples: &[Sample], decode: &DecodeConfig) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for s in samples {
        out.extend(localize_video(&s.id, &s.streams, s.duration_s, model, decode)?);
    }
    Ok(out)
}

/// Average mAP over `[0.1:0.1:0.9]` of `model` on `samples`.
pub fn evaluate_samples(model: &Model, samples: &[Sample], decode: &DecodeConfig) -> Result<f64> {
    let cands = predict_samples(model, samples, decode)?;
    let gt: Vec<GroundTruth> = samples.iter().flat_map(Sample::ground_truth).collect();
    let taxonomy = crate::data::Taxonomy::numbered(model.config.classes);
    Ok(ap_report(&cands, &gt, &taxonomy, &DEFAULT_THRESHOLDS, samples.len()).avg_map)
}

type Gradients = Vec<(String, Vec<f32>)>;

fn video_gradients(
    params: &ParamStore<f32>,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    sample: &Sample,
    targets: &TargetAssignment,
    cls_div: f64,
    positives: usize,
) -> Result<(Gradients, f64, f64)> {
    let input = input_from_streams::<f32>(&sample.streams);
    let mut s = Session::new(params);
    let out = forward(&mut s, mcfg, &input)?;
    let sums = loss_sums(&mut s.graph, &out, targets, tcfg)?;
    let cls = s.graph.value(sums.0).data()[0] as f64;
    let reg = sums.1.map_or(0.0, |r| s.graph.value(r).data()[0] as f64);
    let loss = weighted_loss(&mut s.graph, sums, cls_div, positives, tcfg.lambda)?;
    s.graph.backward(loss)?;
    Ok((s.gradients(), cls, reg))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Trains from a fresh initialization.
///
/// Loss normalizers are taken over the whole batch, so each batch follows
/// the loss definition applied to all of its videos at once. Per-video
/// gradients may be computed on several threads but are summed in batch
/// order, so results do not depend on the thread count. When `run_dir` is
/// given, `metrics.jsonl` gets one line per epoch and `checkpoint.davt`
/// holds the best parameters so far.
pub fn fit(
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    decode: &DecodeConfig,
    train: &[Sample],
    val: &[Sample],
    run_dir: Option<&Path>,
) -> Result<FitOutcome> {
    mcfg.validate()?;
    tcfg.validate(mcfg.pyramid_levels)?;
    decode.validate()?;
    if train.is_empty() {
        return Err(Error::Config {
            field: "train".into(),
            detail: "the training subset is empty".into(),
        });
    }
    let targets: Vec<TargetAssignment> = train
        .iter()
        .map(|s| assign_targets(&s.events, &s.grid(mcfg), tcfg))
        .collect::<Result<_>>()?;
    let skipped: usize = targets.iter().map(|t| t.skipped.len()).sum();
    if skipped > 0 {
        log::warn!("{skipped} training events own no pyramid step");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(tcfg.threads)
        .build()
        .map_err(|e| Error::Contract(e.to_string()))?;
    let rng = SeededRng::new(tcfg.seed);
    let mut model = Model::new(mcfg.clone(), rng.fork(0).seed())?;
    let mut adam = Adam::new(tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps, tcfg.weight_decay);
    let batches = train.len().div_ceil(tcfg.batch_size);
    let total_steps = batches * tcfg.epochs;
    let warmup_steps = batches * tcfg.warmup_epochs;
    let mut metrics_file = match run_dir {
        Some(dir) => {
            let path = dir.join("metrics.jsonl");
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 1..=tcfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.fork(epoch as u64).shuffle(&mut order);
        let (mut losses, mut cls_terms, mut reg_terms) = (Vec::new(), 0.0, 0.0);
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let steps: usize = chunk.iter().map(|&i| targets[i].valid_steps()).sum();
            let positives: usize = chunk.iter().map(|&i| targets[i].num_positives()).sum();
            let cls_div = cls_divisor(tcfg, steps, positives);
            let params = &model.params;
            let results: Vec<(Gradients, f64, f64)> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| video_gradients(params, mcfg, tcfg, &train[i], &targets[i], cls_div, positives))
                    .collect::<Result<_>>()
            })?;
            let cls: f64 = results.iter().map(|r| r.1).sum();
            let reg: f64 = results.iter().map(|r| r.2).sum();
            let lb = breakdown(cls, reg, steps, positives, tcfg);
            if !lb.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    cls,
                    reg,
                });
            }
            model.params.zero_grad();
            for (g, _, _) in &results {
                model.params.accumulate(g)?;
            }
            lr = learning_rate((epoch - 1) * batches + b + 1, total_steps, warmup_steps, tcfg.lr);
            adam.update(&mut model.params, lr);
            losses.push(lb.total);
            cls_terms += lb.cls_term(tcfg);
            reg_terms += lb.reg_term();
        }
        let n = losses.len() as f64;
        let val_avg_map = if val.is_empty() {
            None
        } else {
            Some(evaluate_samples(&model, val, decode)?)
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: losses.iter().sum::<f64>() / n,
            train_loss_median: median(&mut losses),
            cls: cls_terms / n,
            reg: reg_terms / n,
            val_avg_map,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cls {:.4}, reg {:.4}) lr {:.2e} val avg mAP {}",
            m.train_loss,
            m.cls,
            m.reg,
            m.lr,
            m.val_avg_map.map_or("-".into(), |v| format!("{v:.4}"))
        );
        if let Some((f, path)) = metrics_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(path.as_path(), e))?;
        }
        let score = val_avg_map.unwrap_or(f64::NEG_INFINITY);
        let improved = val.is_empty() || best.as_ref().is_none_or(|(s, _, _)| score > *s);
        if improved {
            best = Some((score, epoch, model.clone()));
            if let Some(dir) = run_dir {
                model.save(&dir.join("checkpoint.davt"))?;
            }
        }
        history.push(m);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch ran");
    Ok(FitOutcome {
        best,
        best_epoch,
        last: model,
        history,
    })
}
