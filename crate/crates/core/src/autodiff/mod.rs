//! Reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! A [`Tape`] records one forward pass. Every primitive checks shapes up
//! front and refuses to produce non-finite values, so a diverging step
//! surfaces as an error at the op that produced it. Gradients are obtained
//! with [`Tape::backward`] from a scalar root.
//!
//! The primitive set is deliberately small: matmul, add, multiply, scale,
//! concat, slice, embedding lookup, softmax, log-softmax, layer norm, relu,
//! reshape, transpose, sum, mean, one-hot and masked cross-entropy, plus
//! [`Tape::stop_gradient`].

mod optim;
mod tape;
mod tensor;

pub use optim::Adam;
pub use tape::{log_softmax, softmax, Gradients, Tape, Var};
pub use tensor::{ParamSet, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("no gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Self::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
