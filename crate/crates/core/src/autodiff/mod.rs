//! Reverse-mode automatic differentiation, parameters and optimizer.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{adam_step, Adam, Init, ParamId, ParamSpec, ParamStore};
pub use tensor::Tensor;
