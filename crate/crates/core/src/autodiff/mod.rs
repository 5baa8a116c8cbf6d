//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The operation set is deliberately small: exactly what the analysis
//! encoder, separator and synthesis decoder need. Build a [`Graph`], create
//! leaves with [`Graph::param`] / [`Graph::constant`], chain operations, then
//! call [`Graph::backward`] on a scalar node.

mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, LinearOp, Padding, Pooled, UnpoolPlacement, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("unpool with recorded indices needs the pooling indices")]
    MissingIndices,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
