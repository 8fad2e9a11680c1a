//! Focal classification plus generalized-IoU regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, RawPredictions};
use crate::numerics::{focal_value, giou_loss_1d, GiouTarget, Graph, Scalar, Var};

use super::{ClsNormalization, TargetAssignment, TrainConfig};

/// Loss sums and their normalizers.
///
/// `total = cls / steps + λ · reg / positives`, with the regression part 0
/// when there are no positives (classification is divided by `positives`
/// instead when so configured).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub steps: usize,
    pub positives: usize,
}

impl LossBreakdown {
    pub fn cls_term(&self, cfg: &TrainConfig) -> f64 {
        self.cls / cls_divisor(cfg, self.steps, self.positives)
    }

    pub fn reg_term(&self) -> f64 {
        if self.positives == 0 {
            0.0
        } else {
            self.reg / self.positives as f64
        }
    }
}

/// Binary focal loss of one probability (clamped to `[1e-6, 1 − 1e-6]`).
pub fn focal_loss(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    focal_value(p, y, alpha, gamma)
}

/// `1 − gIoU` of anchored intervals; errors on a degenerate target.
pub fn giou_loss(pred: (f64, f64), target: (f64, f64)) -> Result<f64> {
    if !(target.0 + target.1 > 0.0) || target.0 < 0.0 || target.1 < 0.0 || pred.0 < 0.0 || pred.1 < 0.0 {
        return Err(Error::DegenerateTarget(target.0, target.1));
    }
    Ok(giou_loss_1d(pred.0, pred.1, target.0, target.1))
}

pub(crate) fn cls_divisor(cfg: &TrainConfig, steps: usize, positives: usize) -> f64 {
    match cfg.cls_normalization {
        ClsNormalization::Steps => steps.max(1) as f64,
        ClsNormalization::Positives => positives.max(1) as f64,
    }
}

fn check_levels(levels: usize, targets: &TargetAssignment) -> Result<()> {
    if levels != targets.levels.len() {
        return Err(Error::shape(
            "total_loss",
            format!("{levels} prediction levels for {} target levels", targets.levels.len()),
        ));
    }
    Ok(())
}

/// Evaluates the loss of detached predictions.
pub fn total_loss(raw: &RawPredictions, targets: &TargetAssignment, cfg: &TrainConfig) -> Result<LossBreakdown> {
    check_levels(raw.levels.len(), targets)?;
    let c = targets.classes;
    let (mut cls, mut reg) = (0.0, 0.0);
    for (lvl, tgt) in raw.levels.iter().zip(&targets.levels) {
        if lvl.probs.shape() != [tgt.len, c] {
            return Err(Error::shape(
                "total_loss",
                format!("probabilities {:?} for targets [{}, {c}]", lvl.probs.shape(), tgt.len),
            ));
        }
        for i in 0..tgt.valid_len {
            for k in 0..c {
                cls += focal_loss(lvl.probs.at(&[i, k]) as f64, tgt.labels[i * c + k], cfg.focal_alpha, cfg.focal_gamma);
            }
        }
        for p in &tgt.positives {
            let pred = (lvl.start_distance(p.class, p.step) as f64, lvl.end_distance(p.class, p.step) as f64);
            reg += giou_loss(pred, (p.start, p.end))?;
        }
    }
    Ok(breakdown(cls, reg, targets.valid_steps(), targets.num_positives(), cfg))
}

pub(crate) fn breakdown(cls: f64, reg: f64, steps: usize, positives: usize, cfg: &TrainConfig) -> LossBreakdown {
    let mut total = cls / cls_divisor(cfg, steps, positives);
    if positives > 0 {
        total += cfg.lambda * reg / positives as f64;
    }
    LossBreakdown {
        total,
        cls,
        reg,
        steps,
        positives,
    }
}

/// Records the summed loss terms of one video on `g`.
///
/// Returns `(cls_sum, reg_sum)`; `reg_sum` is `None` without positives.
pub fn loss_sums<S: Scalar>(
    g: &mut Graph<S>,
    out: &ForwardOutput<S>,
    targets: &TargetAssignment,
    cfg: &TrainConfig,
) -> Result<(Var, Option<Var>)> {
    check_levels(out.levels.len(), targets)?;
    let c = targets.classes;
    let mut cls: Option<Var> = None;
    let mut reg: Option<Var> = None;
    let add = |g: &mut Graph<S>, acc: Option<Var>, v: Var| -> Result<Var> {
        match acc {
            Some(a) => g.add(a, v),
            None => Ok(v),
        }
    };
    for (lvl, tgt) in out.levels.iter().zip(&targets.levels) {
        let y: Vec<S> = tgt.labels.iter().map(|&v| S::of(v)).collect();
        let w: Vec<S> = (0..tgt.len * c)
            .map(|j| if j / c < tgt.valid_len { S::one() } else { S::zero() })
            .collect();
        let f = g.focal_sum(lvl.cls, &y, &w, cfg.focal_alpha, cfg.focal_gamma)?;
        cls = Some(add(g, cls, f)?);
        if !tgt.positives.is_empty() {
            let items: Vec<GiouTarget> = tgt
                .positives
                .iter()
                .map(|p| GiouTarget {
                    row: p.step,
                    class: p.class,
                    start: p.start,
                    end: p.end,
                })
                .collect();
            let r = g.giou_sum(lvl.reg, c, &items)?;
            reg = Some(add(g, reg, r)?);
        }
    }
    let cls = cls.ok_or_else(|| Error::Contract("loss over an empty pyramid".into()))?;
    Ok((cls, reg))
}

/// Scalar loss of one video given the normalizers of its batch:
/// `cls_sum / cls_div + λ · reg_sum / positives`.
pub fn weighted_loss<S: Scalar>(
    g: &mut Graph<S>,
    sums: (Var, Option<Var>),
    cls_div: f64,
    positives: usize,
    lambda: f64,
) -> Result<Var> {
    let cls = g.scale(sums.0, 1.0 / cls_div)?;
    match sums.1 {
        Some(r) if positives > 0 => {
            let r = g.scale(r, lambda / positives as f64)?;
            g.add(cls, r)
        }
        _ => Ok(cls),
    }
}
