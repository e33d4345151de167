//! Minimal dense-tensor computation with reverse-mode differentiation.
//!
//! Everything the policies and losses need: fully connected layers, 2-D
//! convolution, a gated recurrent cell, scaled dot-product attention,
//! softmax, and Adam. Forward passes are recorded on a [`Tape`]; calling
//! [`Tape::backward`] accumulates gradients into the owning
//! [`ParameterStore`].

mod checkpoint;
mod init;
mod layers;
mod store;
mod tape;

pub use checkpoint::{load_store, save_store, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use init::orthogonal;
pub use layers::{attention_context, Activation, Conv2d, GruCell, Mlp};
pub use store::{AdamConfig, ParameterStore};
pub use tape::{Tape, Var};
