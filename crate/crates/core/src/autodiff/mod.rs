//! Dense tensors, a recording tape with reverse-mode gradients, and Adam.
//!
//! The usual training step binds each [`Parameter`] to a fresh [`Tape`] as
//! a trainable leaf, runs the forward pass, calls [`Tape::backward`] on the
//! scalar loss and accumulates the resulting gradients back into the
//! parameters before an [`Adam::step`].

mod adam;
mod checkpoint;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, Parameter};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
