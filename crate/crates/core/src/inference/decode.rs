use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::FeatureStreams;
use crate::error::{Error, Result};
use crate::model::{Model, RawPredictions};

use super::soft_nms;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Minimum class probability for a step to emit a candidate.
    pub score_threshold: f64,
    /// Candidates kept per video before suppression.
    pub pre_nms_top_k: usize,
    /// Gaussian Soft-NMS width.
    pub sigma: f64,
    /// Candidates kept per video after suppression.
    pub max_kept: usize,
    /// Suppression stops once the best remaining score drops below this.
    pub min_score: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 0.001,
            pre_nms_top_k: 2000,
            sigma: 0.9,
            max_kept: 100,
            min_score: 0.001,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, detail: &str| {
            Err(Error::Config {
                field: field.into(),
                detail: detail.into(),
            })
        };
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return bad("score_threshold", "must lie in [0, 1]");
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return bad("sigma", "must be positive and finite");
        }
        if !(self.min_score >= 0.0) {
            return bad("min_score", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub label_id: usize,
    pub score: f64,
}

impl Candidate {
    pub fn interval(&self) -> (f64, f64) {
        (self.start_s, self.end_s)
    }
}

/// Descending score, then earlier start, then video id, end and label.
pub(crate) fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start_s.total_cmp(&b.start_s))
        .then_with(|| a.video_id.cmp(&b.video_id))
        .then(a.end_s.total_cmp(&b.end_s))
        .then(a.label_id.cmp(&b.label_id))
}

/// Time in seconds of step `i` on a level whose steps span `scale` base steps.
pub fn step_center(hop_s: f64, offset_s: f64, scale: usize, i: usize) -> f64 {
    offset_s + (i as f64 + 0.5) * hop_s * scale as f64
}

/// Every valid `(level, step, class)` with probability above the threshold
/// becomes the interval `[t − d_s, t + d_e]`, clamped to `[0, duration_s]`.
/// The global top-k by score is kept.
pub fn decode_candidates(video_id: &str, raw: &RawPredictions, duration_s: f64, cfg: &DecodeConfig) -> Vec<Candidate> {
    let hop = raw.hop_s as f64;
    let offset = raw.offset_s as f64;
    let mut out = Vec::new();
    for lvl in &raw.levels {
        let unit = hop * lvl.scale as f64;
        for i in 0..lvl.valid_len.min(lvl.len()) {
            let t = step_center(hop, offset, lvl.scale, i);
            for c in 0..lvl.classes() {
                let p = lvl.probs.at(&[i, c]) as f64;
                if p <= cfg.score_threshold {
                    continue;
                }
                let start = (t - lvl.start_distance(c, i) as f64 * unit).max(0.0);
                let end = (t + lvl.end_distance(c, i) as f64 * unit).min(duration_s);
                if start < end {
                    out.push(Candidate {
                        video_id: video_id.to_owned(),
                        start_s: start,
                        end_s: end,
                        label_id: c,
                        score: p,
                    });
                }
            }
        }
    }
    // Stable sort keeps level/step/class order among exact ties.
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.pre_nms_top_k);
    out
}

/// Forward, decode and suppress for one video.
pub fn localize_video(
    video_id: &str,
    streams: &FeatureStreams,
    duration_s: f64,
    model: &Model,
    cfg: &DecodeConfig,
) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    let raw = model.predict(streams)?;
    let cands = decode_candidates(video_id, &raw, duration_s, cfg);
    Ok(soft_nms(cands, cfg))
}
