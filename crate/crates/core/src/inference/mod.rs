//! Decoding raw head outputs into scored intervals and multi-class Soft-NMS.

mod decode;
mod nms;
mod predictions;

pub use decode::{decode_candidates, localize_video, step_center, Candidate, DecodeConfig};
pub use nms::{hard_nms, soft_nms};
pub use predictions::Predictions;
