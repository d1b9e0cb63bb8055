//! Minimal neural-network substrate: tensors, a reverse-mode tape, parameter
//! storage and the Adam optimizer.

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{Adam, ParamId, ParamStore};
pub use tensor::Tensor;
