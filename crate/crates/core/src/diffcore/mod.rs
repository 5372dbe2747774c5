//! Tensors, reverse-mode differentiation, sequential networks and optimizers.

pub mod container;
pub mod gradcheck;
pub mod network;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use container::Container;
pub use gradcheck::{check_function, grad_check, GradCheckReport};
pub use network::{Bound, Forward, LayerSpec, Network, Padding};
pub use optim::{OptimizerKind, OptimizerState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
