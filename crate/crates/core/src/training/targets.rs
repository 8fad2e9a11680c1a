//! Mapping ground-truth events onto the pyramid grid.

use crate::data::EventInstance;
use crate::error::Result;
use crate::inference::step_center;
use crate::model::ModelConfig;

use super::TrainConfig;

/// Time grid of every level for one padded video.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidGrid {
    pub hop_s: f64,
    pub offset_s: f64,
    pub classes: usize,
    pub levels: Vec<GridLevel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridLevel {
    pub len: usize,
    pub valid_len: usize,
    /// Base steps per step of this level.
    pub scale: usize,
}

impl PyramidGrid {
    pub fn new(cfg: &ModelConfig, len: usize, valid_len: usize, hop_s: f64, offset_s: f64) -> Self {
        let levels = cfg
            .level_lengths(len)
            .into_iter()
            .zip(cfg.level_lengths(valid_len))
            .enumerate()
            .map(|(l, (len, valid_len))| GridLevel {
                len,
                valid_len,
                scale: cfg.level_scale(l),
            })
            .collect();
        PyramidGrid {
            hop_s,
            offset_s,
            classes: cfg.classes,
            levels,
        }
    }

    pub fn center(&self, level: usize, step: usize) -> f64 {
        step_center(self.hop_s, self.offset_s, self.levels[level].scale, step)
    }

    /// Seconds per step of `level`.
    pub fn unit(&self, level: usize) -> f64 {
        self.hop_s * self.levels[level].scale as f64
    }

    /// End of the time span covered by the full (padded) base grid.
    pub fn span_end(&self) -> f64 {
        self.offset_s + self.levels.first().map_or(0, |l| l.len) as f64 * self.hop_s
    }
}

/// Positive (step, class) at one level with its distances in level steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub step: usize,
    pub class: usize,
    pub start: f64,
    pub end: f64,
    /// Index of the owning event in the input list.
    pub event: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub len: usize,
    pub valid_len: usize,
    pub scale: usize,
    /// `[len, classes]` 0/1 labels.
    pub labels: Vec<f64>,
    pub positives: Vec<Positive>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub classes: usize,
    pub levels: Vec<LevelTargets>,
    /// Events inside the grid span that own no step anywhere.
    pub skipped: Vec<usize>,
    /// Events starting beyond the grid span.
    pub dropped: Vec<usize>,
}

impl TargetAssignment {
    pub fn num_positives(&self) -> usize {
        self.levels.iter().map(|l| l.positives.len()).sum()
    }

    pub fn valid_steps(&self) -> usize {
        self.levels.iter().map(|l| l.valid_len).sum()
    }
}

/// Assigns every valid `(level, step, class)`.
///
/// A step is positive for class `c` when an event of class `c` contains its
/// center and `max(d_s, d_e)`, measured in base steps, falls in the level's
/// band. Among several such events the shortest wins (then the earliest
/// listed). Targets are the distances to that event's boundaries in level
/// steps.
pub fn assign_targets(events: &[EventInstance], grid: &PyramidGrid, cfg: &TrainConfig) -> Result<TargetAssignment> {
    let nl = grid.levels.len();
    let c = grid.classes;
    let mut owned = vec![false; events.len()];
    let mut dropped = Vec::new();
    let span_end = grid.span_end();
    let live: Vec<usize> = (0..events.len())
        .filter(|&k| {
            if events[k].start_s >= span_end {
                log::warn!(
                    "event {k} at {:.3}s lies beyond the {:.3}s feature span; dropped",
                    events[k].start_s,
                    span_end
                );
                dropped.push(k);
                false
            } else {
                true
            }
        })
        .collect();
    let mut levels = Vec::with_capacity(nl);
    for (l, lvl) in grid.levels.iter().enumerate() {
        let (lo, hi) = cfg.level_band(l, nl);
        let unit = grid.unit(l);
        let base = grid.hop_s;
        let mut labels = vec![0.0; lvl.len * c];
        let mut positives = Vec::new();
        for i in 0..lvl.valid_len {
            let t = grid.center(l, i);
            let mut best: Vec<Option<usize>> = vec![None; c];
            for &k in &live {
                let e = &events[k];
                if !(e.start_s <= t && t <= e.end_s) {
                    continue;
                }
                let reach = (t - e.start_s).max(e.end_s - t) / base;
                if !(lo <= reach && reach < hi) {
                    continue;
                }
                if let Some(radius) = cfg.center_sampling {
                    let mid = 0.5 * (e.start_s + e.end_s);
                    if (t - mid).abs() > radius * unit {
                        continue;
                    }
                }
                let slot = &mut best[e.label_id];
                if slot.is_none_or(|b| e.duration() < events[b].duration()) {
                    *slot = Some(k);
                }
            }
            for (class, slot) in best.into_iter().enumerate() {
                let Some(k) = slot else { continue };
                let e = &events[k];
                labels[i * c + class] = 1.0;
                owned[k] = true;
                positives.push(Positive {
                    step: i,
                    class,
                    start: (t - e.start_s) / unit,
                    end: (e.end_s - t) / unit,
                    event: k,
                });
            }
        }
        levels.push(LevelTargets {
            len: lvl.len,
            valid_len: lvl.valid_len,
            scale: lvl.scale,
            labels,
            positives,
        });
    }
    let skipped = live.into_iter().filter(|&k| !owned[k]).collect();
    Ok(TargetAssignment {
        classes: c,
        levels,
        skipped,
        dropped,
    })
}
