//! Target assignment, the joint focal/gIoU loss and the training loop.

mod check;
mod config;
mod fit;
mod loss;
mod optim;
mod targets;

pub use check::end_to_end_grad_check;
pub use config::{ClsNormalization, TrainConfig};
pub use fit::{corpus_samples, evaluate_samples, fit, load_samples, predict_samples, EpochMetrics, FitOutcome, Sample};
pub use loss::{focal_loss, giou_loss, loss_sums, total_loss, weighted_loss, LossBreakdown};
pub use optim::{learning_rate, Adam};
pub use targets::{assign_targets, GridLevel, LevelTargets, Positive, PyramidGrid, TargetAssignment};
