//! Dense `f64` tensors and a reverse-mode tape for the networks and
//! unrolled simulators in `meshinvert`.
//!
//! Gradients flow only into leaves created with `requires_grad`; everything
//! derived purely from constants is skipped during the reverse sweep.

mod tape;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("non-finite value produced by op #{index} ({op})")]
    NonFinite { index: usize, op: &'static str },
    #[error("non-finite adjoint produced while differentiating op #{index} ({op})")]
    NonFiniteAdjoint { index: usize, op: &'static str },
    #[error("invalid recompute plan: {0}")]
    Plan(String),
    #[error("segment {segment} contains a non-deterministic op ({op}) and cannot be replayed")]
    NonDeterministic { segment: usize, op: &'static str },
}
