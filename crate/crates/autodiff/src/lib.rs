//! Minimal dense-tensor kernel with reverse-mode differentiation.
//!
//! Tensors are plain row-major `f32` buffers. A [`Tape`] records every
//! operation of one forward pass; replaying it in reverse accumulates
//! gradients for all leaves that asked for them. A tape is confined to a
//! single thread; parallelism happens across tapes, never within one.

mod optim;
mod tape;
mod tensor;

pub mod gradcheck;

pub use optim::{AdamW, StepOutcome};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Tensor, TensorError};
