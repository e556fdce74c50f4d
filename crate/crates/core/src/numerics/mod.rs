//! Tensors, dense kernels, reverse-mode differentiation and the optimizer.

mod adam;
mod gradcheck;
pub(crate) mod linalg;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use gradcheck::{finite_difference_check, relative_error, GradCheck, REL_ERROR_FLOOR};
pub use linalg::{cross_entropy_sequence, matmul, softmax};
pub use rng::{derive_seed, Rng};
pub use tape::{Array, Gradients, NodeId, Tape};
pub(crate) use tape::{gelu, LN_EPS};
pub use tensor::Tensor;
