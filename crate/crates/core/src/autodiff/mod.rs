//! Reverse-mode automatic differentiation over dense tensors, with
//! recordable backward passes for gradients of gradients.

mod backward;
pub mod gradcheck;
mod kernels;
mod loss;
mod tensor;

pub use backward::grad;
pub use loss::cross_entropy;
pub use tensor::{finite_checks, set_finite_checks, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("index {index} out of range {bound} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("shape {shape:?} does not match {len} stored elements")]
    Storage { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("{0}")]
    Contract(String),
}
