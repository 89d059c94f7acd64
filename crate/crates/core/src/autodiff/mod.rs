//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every [`Primitive`] application in topological order.
//! [`Tape::backward`] sweeps it in reverse from a scalar loss, and
//! [`Tape::replay`] re-evaluates it after leaf values change, which is what
//! the finite-difference checker relies on.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_recorded, finite_difference_check, relative_error, Coordinate, GradCheckReport};
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} is invalid for shape {shape:?}")]
    InvalidAxis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange { op: &'static str, index: usize, extent: usize },
    #[error("softmax over a fully masked slice (shape {shape:?}, axis {axis})")]
    EmptySoftmax { shape: Vec<usize>, axis: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite {which} gradient at {param}[{index}]")]
    NonFinite { which: &'static str, param: String, index: usize },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}
