//! Dense audio-visual event localization.
//!
//! The crate covers the whole pipeline: a small reverse-mode tensor
//! substrate ([`numerics`]), dataset tooling ([`data`]), the cross-modal
//! pyramid model ([`model`]), target assignment and optimization
//! ([`training`]), decoding with Soft-NMS ([`inference`]) and the tIoU/mAP
//! protocol ([`eval`]).

// Negated comparisons are how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
