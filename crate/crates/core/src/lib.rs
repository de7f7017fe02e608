//! Dual-stage vision transformer for multi-label chest X-ray classification.
//!
//! A ViT branch and a Swin branch each pool an image to a feature vector; the
//! ViT vector is projected to the Swin width, the two are concatenated, and a
//! single linear head produces one logit per label. Everything runs on the
//! small reverse-mode autodiff engine in [`tensor`].

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod swin;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use fusion::{DualStageModel, ModelConfig};
pub use tensor::{Element, ParamId, ParamStore, Tape, Tensor, Var};
