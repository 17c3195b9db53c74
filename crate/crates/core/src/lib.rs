//! Autoregressive video generation without vector quantization.
//!
//! Frames are predicted one after another by a block-causal temporal
//! transformer; each frame is decoded set-by-set by a bidirectional spatial
//! transformer whose per-token outputs condition a small diffusion head.

pub mod attention;
pub mod block;
pub mod codec;
pub mod data;
pub mod diffusion;
pub mod embed;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod nn;
pub mod scale_shift;
pub mod schedule;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{NovaError, Result};
pub use tensor::{Float, Graph, Mask, ParamId, ParamStore, Tape, Tensor, Var};
