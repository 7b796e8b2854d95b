//! Dense tensors, a reverse-mode tape, and a finite-difference checker.

mod gradcheck;
mod graph;
mod optim;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, Var};
pub use kernels::{attention, cross_entropy_with_logits, matmul, mse, softmax};
pub use optim::{Optimizer, OptimizerState};
pub use params::{normal_tensor, ParamId, ParamStore};
pub use tensor::Tensor;
