//! Real NVP normalizing flows at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`ndtensor`]: `f64` tensors and a reverse-mode differentiation tape.
//! - [`conditioner`]: residual convolutional networks producing the scale
//!   and translation of each coupling layer.
//! - [`flow`]: the bijections (affine coupling, squeeze, batch-norm) and the
//!   multi-scale model with exact log-likelihood and sampling.
//! - [`datapipe`]: dequantization, logit preprocessing, augmentation, toy and
//!   sprite generators, and the on-disk dataset formats.
//! - [`trainer`]: Adam, the regularized likelihood objective, the training
//!   loop, metrics and checkpoints.
//! - [`latent`]: latent-space manipulations (manifold interpolation,
//!   multi-scale compression, extrapolation, attribute transfer).

pub mod conditioner;
pub mod datapipe;
pub mod error;
pub mod flow;
pub mod latent;
pub mod ndtensor;
pub mod trainer;

pub use error::{Error, Result};
pub use flow::{FlowModel, ModelConfig, Mode};
pub use ndtensor::{Tape, Tensor, Var};
