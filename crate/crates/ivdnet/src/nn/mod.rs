//! Minimal reverse-mode differentiation over 4-D tensors.
//!
//! The heavy lifting is three pieces: a flat parameter store ([`ParamSet`]),
//! stride-1 convolution kernels built on im2col + matrix multiply
//! ([`conv`]), and an eager tape ([`Graph`]) that records enough per-op state
//! to replay gradients backward. Inference uses the same ops with recording
//! switched off, so intermediate buffers free as soon as the caller drops
//! them.

pub mod conv;
pub mod graph;
pub mod params;

pub use graph::{Graph, Value};
pub use params::{Param, ParamId, ParamSet};
