// SPDX-License-Identifier: MIT OR Apache-2.0

//! # intervene
//!
//! An intervention engine for small neural networks. Models expose named
//! activation sites (`block_output`, `mlp_activation`, `cell_output`, ...);
//! an [`engine::IntervenableModel`] wraps a model with a declarative
//! configuration and runs forward passes in which those activations are
//! collected, overwritten, perturbed, or passed through trainable
//! rotated-subspace maps.
//!
//! Everything runs on the crate's own tensor type with reverse-mode
//! autodiff, so trainable interventions (DAS-style rotations, low-rank
//! maps, learned soft boundaries) and interchange intervention training are
//! ordinary gradient descent.
//!
//! Modules:
//! - [`tensor`]: tensors, autodiff tape, Adam, blob format.
//! - [`model`]: MLP, GRU and decoder-only transformer with site hooks.
//! - [`interventions`]: the intervention kinds as pure functions.
//! - [`engine`]: config parsing, location resolution, parallel/serial scheduling.
//! - [`serialization`]: shareable bundles on disk.
//! - [`harness`]: toy-scale tracing, DAS-vs-probe and steering studies.

pub mod engine;
pub mod error;
pub mod harness;
pub mod interventions;
pub mod model;
pub mod par;
pub mod serialization;
pub mod tensor;

pub use error::{Error, Result};
