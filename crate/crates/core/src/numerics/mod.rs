//! Tensor storage, elementwise kernels and the finite-difference harness.

pub mod dump;
pub mod grad;
pub mod gradcheck;
pub mod linalg;
pub mod ops;
mod tensor;

pub use dump::{dump_tensor, parse_tensor_dump};
pub use grad::{backprop_chain, Differentiable, GradRecord};
pub use gradcheck::{backward_linearity_error, grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use ops::{elementwise, elementwise_backward, Elementwise, ElementwiseOp};
pub use tensor::Tensor;
