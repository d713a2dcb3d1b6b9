//! Multi-stream hyper-dense UNet for multi-modal volumetric segmentation.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`plan`] — symbolic encoder wiring and channel arithmetic
//! - [`nn`] — tensor ops with reverse-mode gradients
//! - [`model`] — extended inception blocks, the multi-stream encoder/decoder,
//!   fusion baselines, and checkpointing
//! - [`data`] — synthetic multi-modal phantoms, volume/slice conversion, and
//!   dataset persistence
//! - [`train`] — losses, Adam, the learning-rate schedule, and the training
//!   loop
//! - [`metrics`] — volumetric Dice and per-disc localization evaluation
//! - [`report`] — loss curves, comparison tables, and overlay rendering
//! - [`cli`] — the `ivdnet` command-line entry point

pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod plan;
pub mod report;
pub mod train;

pub use error::{Error, Result};
