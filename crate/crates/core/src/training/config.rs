use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the summed classification loss is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsNormalization {
    /// By the number of valid steps over all levels.
    #[default]
    Steps,
    /// By the number of positive (level, step, class) triples.
    Positives,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Weight of the regression term.
    pub lambda: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Lower bounds, in base steps, of the `max(d_s, d_e)` band owned by
    /// each level; the last level used owns everything above its bound.
    pub level_ranges: Vec<f64>,
    /// When set, only steps within this many level steps of an event's
    /// center are positive.
    pub center_sampling: Option<f64>,
    pub cls_normalization: ClsNormalization,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Worker threads for per-video gradients; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            warmup_epochs: 5,
            lr: 1e-4,
            batch_size: 16,
            weight_decay: 1e-4,
            lambda: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            level_ranges: vec![0.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            center_sampling: None,
            cls_normalization: ClsNormalization::Steps,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 2023,
            threads: 1,
        }
    }
}

impl TrainConfig {
    /// Schedule for the desk-scale synthetic corpus.
    pub fn small() -> Self {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 2,
            lr: 1e-3,
            batch_size: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        let bad = |field: &str, detail: String| {
            Err(Error::Config {
                field: field.into(),
                detail,
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs", format!("{} exceeds {} epochs", self.warmup_epochs, self.epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr", "must be positive".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda", "must be non-negative".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) || !(self.focal_gamma >= 0.0) {
            return bad("focal_alpha", "alpha must lie in [0, 1] and gamma be non-negative".into());
        }
        let r = &self.level_ranges;
        if r.len() < levels {
            return bad("level_ranges", format!("{} bounds for {levels} pyramid levels", r.len()));
        }
        if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || r.windows(2).any(|w| w[0] >= w[1]) {
            return bad("level_ranges", "bounds must be finite, non-negative and strictly increasing".into());
        }
        if self.center_sampling.is_some_and(|c| !(c > 0.0)) {
            return bad("center_sampling", "radius must be positive".into());
        }
        if self.threads == 0 {
            return bad("threads", "must be at least 1".into());
        }
        Ok(())
    }

    /// `[lo, hi)` band in base steps for `level` of `levels`.
    pub fn level_band(&self, level: usize, levels: usize) -> (f64, f64) {
        let lo = self.level_ranges[level];
        let hi = if level + 1 < levels {
            self.level_ranges[level + 1]
        } else {
            f64::INFINITY
        };
        (lo, hi)
    }
}
