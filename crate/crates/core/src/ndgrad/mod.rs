//! Differentiable n-dimensional arrays with a reverse-mode tape.

mod gradcheck;
pub(crate) mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, grad_check_fn, relative_error, GradCheckReport, REL_FLOOR};
pub use scalar::Scalar;
pub use tape::{BinaryKind, ReduceKind, Tape, UnaryKind, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("index {index} out of range for extent {len}")]
    Index { index: usize, len: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value at node {node}, element {index}")]
    NonFinite { node: usize, index: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
