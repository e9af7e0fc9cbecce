//! Minimal neural network stack: tensors, reverse-mode autodiff, the two
//! network architectures, Adam and checkpoints.

pub mod checkpoint;
pub mod conv;
pub mod graph;
pub mod nets;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Padding, Var};
pub use nets::{DiscNet, Network, ParamTensor, SegNet};
pub use optim::Adam;
pub use tensor::{Scalar, Tensor};
