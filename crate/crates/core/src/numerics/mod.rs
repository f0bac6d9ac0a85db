//! Dense tensors, forward kernels, a reverse-mode tape and finite-difference
//! gradient checks.

pub mod gradcheck;
pub mod kernels;
pub mod lstm;
pub mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::{hadamard, leaky_relu, matmul, sigmoid, softmax, squash};
pub use tape::{GradSink, Grads, ParamId, Tape, Var};
pub use tensor::Tensor;
