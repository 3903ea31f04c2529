//! Energy Policy: single-pass multimodal action-chunk generation trained
//! with the energy score.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: f64 tensors, a reverse-mode tape, and a seeded RNG.
//! - [`nn`]: linear layers, LayerNorm, residual and adaLN-Zero blocks, attention.
//! - [`energy`]: the energy score, its two-sample loss, and exact oracles.
//! - [`policy`]: transformer backbone with energy, L2 and DDPM heads.
//! - [`env`] and [`data`]: toy environments, scripted experts, datasets.
//! - [`train`]: optimizer, training loop, rollouts, metrics, checkpoints.
//! - [`cli`]: the command-line workbench.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod energy;
pub mod env;
pub mod error;
pub mod nn;
pub mod policy;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
