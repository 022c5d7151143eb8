//! Minimal N-dimensional tensors with tape-based reverse-mode differentiation.
//!
//! Everything is `f64` and row-major. Image batches are laid out `[N, H, W, C]`.
//! A [`Tape`] records every primitive op applied to its [`Var`]s; calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns
//! [`Gradients`] for every leaf and [`Parameter`].
//!
//! Binary ops broadcast only in two ways: an operand with a single element
//! (scalar), or an operand whose shape is `[C]` where `C` is the other
//! operand's trailing extent (per-channel vector). Anything else is a shape
//! error.

mod conv;
mod param;
mod tape;
mod tensor;

pub use param::{Gradients, ParamId, ParamKind, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape {shape:?} has a zero extent")]
    EmptyExtent { shape: Vec<usize> },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: argument must be positive, found {value}")]
    NonPositive { op: &'static str, value: f64 },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
}
