//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Gradients can be requested with `create_graph`, in which case the backward
//! pass is itself recorded and can be differentiated again.

mod backward;
mod check;
mod element;
pub mod functional;
mod ops;
mod tensor;

use thiserror::Error;

pub use backward::{grad, vjp};
pub use check::{central_differences, check_gradient};
pub use element::Element;
pub use ops::{apply_primitive, Primitive};
pub use tensor::{is_grad_enabled, set_strict_finite, NoGradGuard, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("data of length {len} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}
