//! Reverse-mode automatic differentiation over dense f32 tensors.

pub mod checkpoint;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use gradcheck::{finite_difference_check, gradient_pair, max_relative_error};
pub use graph::{Graph, Var};
pub(crate) use graph::sigmoid;
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
