//! Robust classification of multichannel wearable-sensor windows.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors with reverse-mode autodiff and a gradient checker.
//! * [`datasets`]: CSV ingestion, z-score normalisation, windowing, splits and
//!   the built-in synthetic task.
//! * [`corruption`]: physical masking/noise, the forward diffusion schedule,
//!   twin-view construction and evaluation-time corruption.
//! * [`model`]: the dual-stream encoder (bidirectional selective scan plus
//!   channel-transposed attention with adaptive fusion).
//! * [`objectives`]: consistency, classification and total losses.
//! * [`trainer`]: AdamW training loop and checkpoint files.
//! * [`evalkit`]: metrics, robustness and sensitivity sweeps, array exports.
//! * [`config`]: the JSON run configuration consumed by the CLI.

pub mod config;
pub mod corruption;
pub mod datasets;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
