//! Differentiable computation substrate: tensors, a reverse-mode tape over a
//! fixed primitive catalog, parameter storage and a finite-difference
//! gradient check.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod primitives;
mod rng;
mod scalar;
mod suite;
mod tensor;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{focal_value, giou_loss_1d, GiouTarget, Graph, Var, LN_EPS, MASK_LOGIT, PROB_EPS};
pub use params::{Param, ParamStore, Session};
pub use primitives::{eval_primitive, Primitive};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use suite::{check_all_primitives, check_primitive, primitive_cases};
pub use tensor::Tensor;
