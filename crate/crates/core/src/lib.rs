pub mod attention;
pub mod graph;
pub mod importance;
pub mod model;
pub mod ops;
pub mod pruning;
pub mod stats;
pub mod tensor;

pub use graph::{GradientStore, Graph, Var};
pub use tensor::{Tensor, TensorError};
