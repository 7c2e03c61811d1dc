//! Dense tensors with a reverse-mode tape, plus feed-forward layers.

mod graph;
mod layer;
mod tensor;

pub use graph::{sigmoid, tree_sum, validate_groups, Gradients, Graph, NodeId, SOFTMAX_FLOOR};
pub use layer::{Activation, BoundNetwork, DenseLayer, DenseNetwork};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension mismatch at {node}: {detail}")]
    Dimension { node: String, detail: String },
    #[error("bad tensor shape: {0}")]
    Shape(String),
    #[error("graph misuse: {0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corrupt snapshot: {0}")]
    Snapshot(String),
}
