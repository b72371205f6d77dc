//! Differentiable numeric kernel: tensors, the reverse-mode tape and optimizers.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, gradient_error};
pub use optim::{adam_step, adamw_step, OptimizerState, StepOutcome};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

/// Negative slope of every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for {ndim}-d tensor")]
    InvalidAxis { op: &'static str, axis: usize, ndim: usize },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{op}: {detail}")]
    BadShape { op: &'static str, detail: String },
}
