//! Differentiable-array substrate: dense `f64` tensors, a recorded
//! computation graph with exact reverse-mode gradients, parameter storage
//! and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

use std::collections::BTreeMap;

pub use graph::{Gradients, Graph, Var};
pub use params::{Init, ParameterStore};
pub use tensor::Tensor;

use crate::error::Result;

/// `dL/dp` for every parameter `p` in `store`, where `L` is the scalar `root`
/// of `graph`. Parameters the root does not depend on get zero gradients.
pub fn evaluate_with_gradients(graph: &Graph, root: Var, store: &ParameterStore) -> Result<BTreeMap<String, Tensor>> {
    graph.param_gradients(root, store)
}
