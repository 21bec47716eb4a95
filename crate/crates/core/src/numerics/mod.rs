//! A small dense tensor engine with reverse-mode differentiation.
//!
//! Only the operations the encoders and the triplet objective need are
//! provided: 3x3 convolution, 2x2 max pooling, dense layers, ReLU, and a
//! handful of elementwise ops and reductions. There is no broadcasting.
//!
//! Forward values live on a [`Tape`]; [`Tape::backward`] consumes the tape
//! and returns [`Gradients`] that can be folded into parameter tensors
//! before an [`sgd_step`].

mod kernels;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use kernels::{conv2d_forward, dense_forward, maxpool2_forward, relu_forward};
pub use optim::{sgd_step, DEFAULT_LR};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any tensor that requires gradients")]
    Detached,
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("parameter {0} has no gradient")]
    MissingGradient(usize),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NumericsError {
    NumericsError::Shape { op, detail: detail.into() }
}
