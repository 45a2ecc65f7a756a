//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every op on a [`Graph`] computes its value immediately and records a
//! backward rule. Parameters live in a [`ParamStore`] outside the graph and are
//! imported per pass; [`Gradients::accumulate_into`] adds the result of a
//! reverse sweep into the store's gradient buffers.
//!
//! Broadcasting is limited to a right operand whose shape is a suffix of the
//! left operand's shape (e.g. a bias row added to every row of a matrix).

mod graph;
mod param;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use param::{Param, ParamId, ParamStore};
pub use tensor::{Float, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range in {op} (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{0}")]
    Usage(String),
}
