//! Dense tensors, a reverse-mode differentiation tape, optimizers and a
//! finite-difference verification harness.

mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod params;
mod real;
mod tensor;

pub use gradcheck::{finite_diff_check, project_to_scalar, GradCheckOptions, GradCheckReport};
pub use graph::{GatherTable, Gradients, Graph, PadMode, Var};
pub use optim::{AdamW, AdamWConfig};
#[allow(unused_imports)]
pub(crate) use params::fnv1a;
pub use params::{trunc_normal, Init, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("finite-difference epsilon {eps} too small for {dtype}")]
    EpsilonTooSmall { eps: f64, dtype: &'static str },
}
