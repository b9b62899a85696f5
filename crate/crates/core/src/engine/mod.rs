//! Tensors and reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
pub mod linalg;
mod tensor;

pub use gradcheck::{check_gradients, FD_STEP};
pub use graph::{BatchStats, Graph, Padding, Var};
pub use tensor::Tensor;
