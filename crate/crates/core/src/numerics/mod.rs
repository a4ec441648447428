//! Dense tensors, reverse-mode gradients, Adam and a finite-difference
//! gradient checker.

mod adam;
mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use adam::{adam_step, Adam, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPSILON};
pub use gradcheck::{finite_diff_check, REL_FLOOR};
pub use graph::{gelu_scalar, Gradients, Graph, NodeId};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{attention, cross_entropy, cross_entropy_grad, matmul, softmax, Tensor};

