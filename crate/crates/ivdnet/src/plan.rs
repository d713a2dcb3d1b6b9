//! Symbolic wiring of the multi-stream encoder.
//!
//! Everything in this module is pure arithmetic on (stream, layer) references:
//! no weights, no activations. The plan answers two questions for every
//! encoder layer of every stream: *which* feature maps feed it, and *how many
//! channels* they add up to. The model assembly and the shape tests both
//! consume the same plan, so channel bookkeeping lives in exactly one place.
//!
//! Layers are 1-based; layer `0` denotes the raw modality image of a stream.
//! The bridge is treated as layer `L + 1`, where `L` is the number of encoder
//! layers (the length of the growth schedule). Raw inputs feed layer 1 only;
//! from layer 2 onward the dense source set consists of the outputs of all
//! previous *layers* (of one stream or of all streams, depending on mode).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How encoder layers are wired to their predecessors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectivityMode {
    /// Each layer sees only the previous layer of its own stream.
    Plain,
    /// Each layer sees all previous layers of its own stream.
    DenseWithinStream,
    /// Each layer sees all previous layers of all streams.
    HyperDense,
}

impl std::fmt::Display for ConnectivityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConnectivityMode::Plain => "plain",
            ConnectivityMode::DenseWithinStream => "dense_within_stream",
            ConnectivityMode::HyperDense => "hyper_dense",
        };
        f.write_str(s)
    }
}

/// A reference to the output of `layer` in `stream`. Both are 1-based;
/// `layer == 0` refers to the raw modality input of the stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureRef {
    pub stream: usize,
    pub layer: usize,
}

impl std::fmt::Display for FeatureRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.layer == 0 {
            write!(f, "s{}.raw", self.stream)
        } else {
            write!(f, "s{}.l{}", self.stream, self.layer)
        }
    }
}

/// Reorders a dense source list for the given stream.
///
/// The list is grouped into blocks of consecutive references sharing the same
/// source layer (the canonical ordering interleaves streams within each layer
/// block, most recent layer first). Within every block the stream order is
/// rotated left by `stream - 1`, so stream 1 keeps the canonical order and
/// stream 2 of a two-stream network sees its own maps first.
///
/// The result is always a permutation of the input.
pub fn permutation_for(stream: usize, sources: &[FeatureRef]) -> Vec<FeatureRef> {
    let mut out = Vec::with_capacity(sources.len());
    let mut start = 0;
    while start < sources.len() {
        let layer = sources[start].layer;
        let mut end = start + 1;
        while end < sources.len() && sources[end].layer == layer {
            end += 1;
        }
        let block = &sources[start..end];
        let rot = (stream - 1) % block.len();
        out.extend_from_slice(&block[rot..]);
        out.extend_from_slice(&block[..rot]);
        start = end;
    }
    out
}

/// Symbolic description of the encoder wiring for one architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityPlan {
    num_streams: usize,
    growth: Vec<usize>,
    mode: ConnectivityMode,
    permute: bool,
    /// `per_layer_inputs[l - 1][s - 1]` lists the sources of layer `l` in
    /// stream `s`, for `l` in `1..=L + 1` (the last entry is the bridge).
    per_layer_inputs: Vec<Vec<Vec<FeatureRef>>>,
}

impl ConnectivityPlan {
    /// Builds the wiring for `num_streams` streams and the given per-layer
    /// output channel schedule, with stream permutation enabled.
    pub fn build(num_streams: usize, growth: &[usize], mode: ConnectivityMode) -> Result<Self> {
        Self::build_with_options(num_streams, growth, mode, true)
    }

    /// Same as [`ConnectivityPlan::build`] but with the per-stream
    /// permutation of dense sources made explicit.
    pub fn build_with_options(
        num_streams: usize,
        growth: &[usize],
        mode: ConnectivityMode,
        permute: bool,
    ) -> Result<Self> {
        if num_streams < 1 {
            return Err(Error::Validation(format!(
                "num_streams must be >= 1, got {num_streams}"
            )));
        }
        if growth.is_empty() {
            return Err(Error::Validation("growth schedule must be non-empty".into()));
        }
        if let Some(&bad) = growth.iter().find(|&&c| c < 1) {
            return Err(Error::Validation(format!(
                "growth entries must be >= 1, got {bad}"
            )));
        }

        let num_layers = growth.len();
        let mut per_layer_inputs = Vec::with_capacity(num_layers + 1);
        for layer in 1..=num_layers + 1 {
            let mut per_stream = Vec::with_capacity(num_streams);
            for stream in 1..=num_streams {
                let canonical = canonical_sources(num_streams, mode, layer, stream);
                let sources = if permute && mode == ConnectivityMode::HyperDense {
                    permutation_for(stream, &canonical)
                } else {
                    canonical
                };
                per_stream.push(sources);
            }
            per_layer_inputs.push(per_stream);
        }

        Ok(ConnectivityPlan {
            num_streams,
            growth: growth.to_vec(),
            mode,
            permute,
            per_layer_inputs,
        })
    }

    pub fn num_streams(&self) -> usize {
        self.num_streams
    }

    /// Number of encoder layers, excluding the bridge.
    pub fn num_layers(&self) -> usize {
        self.growth.len()
    }

    /// Index of the bridge pseudo-layer (`L + 1`).
    pub fn bridge_layer(&self) -> usize {
        self.growth.len() + 1
    }

    pub fn mode(&self) -> ConnectivityMode {
        self.mode
    }

    pub fn growth(&self) -> &[usize] {
        &self.growth
    }

    /// Output channel count of a feature reference (1 for raw inputs).
    pub fn channels_of(&self, r: FeatureRef) -> usize {
        if r.layer == 0 {
            1
        } else {
            self.growth[r.layer - 1]
        }
    }

    /// The ordered source list feeding `layer` in `stream`.
    pub fn inputs(&self, layer: usize, stream: usize) -> Result<&[FeatureRef]> {
        self.check_range(layer, stream)?;
        Ok(&self.per_layer_inputs[layer - 1][stream - 1])
    }

    /// Total input channels of `layer` in `stream`: the sum of the channel
    /// counts of its source list. Layer 1 yields 1 (its raw modality).
    pub fn input_channels(&self, layer: usize, stream: usize) -> Result<usize> {
        let sources = self.inputs(layer, stream)?;
        Ok(sources.iter().map(|&r| self.channels_of(r)).sum())
    }

    /// Output channels of `layer` in any stream.
    pub fn output_channels(&self, layer: usize) -> Result<usize> {
        if layer == 0 || layer > self.num_layers() {
            return Err(Error::Range(format!(
                "layer {layer} outside 1..={}",
                self.num_layers()
            )));
        }
        Ok(self.growth[layer - 1])
    }

    fn check_range(&self, layer: usize, stream: usize) -> Result<()> {
        if layer == 0 || layer > self.bridge_layer() {
            return Err(Error::Range(format!(
                "layer {layer} outside 1..={} (bridge)",
                self.bridge_layer()
            )));
        }
        if stream == 0 || stream > self.num_streams {
            return Err(Error::Range(format!(
                "stream {stream} outside 1..={}",
                self.num_streams
            )));
        }
        Ok(())
    }

    /// Plain-text table: one row per (layer, stream) with the source list and
    /// channel arithmetic.
    pub fn render_table(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "connectivity plan: streams={} mode={} growth={:?} permute={}",
            self.num_streams, self.mode, self.growth, self.permute
        );
        let _ = writeln!(
            out,
            "{:<8} {:<7} {:>6} {:>7}  {}",
            "layer", "stream", "in_ch", "out_ch", "inputs"
        );
        for layer in 1..=self.bridge_layer() {
            let name = if layer == self.bridge_layer() {
                "bridge".to_string()
            } else {
                format!("{layer}")
            };
            for stream in 1..=self.num_streams {
                let sources = &self.per_layer_inputs[layer - 1][stream - 1];
                let in_ch: usize = sources.iter().map(|&r| self.channels_of(r)).sum();
                let out_ch = if layer == self.bridge_layer() {
                    "-".to_string()
                } else {
                    format!("{}", self.growth[layer - 1])
                };
                let refs = sources
                    .iter()
                    .map(|r| r.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                let _ = writeln!(
                    out,
                    "{:<8} {:<7} {:>6} {:>7}  {}",
                    name, stream, in_ch, out_ch, refs
                );
            }
        }
        out
    }
}

/// Canonical (stream-1) source ordering for `layer` in `stream`:
/// interleaved per-layer blocks, most recent layer first.
fn canonical_sources(
    num_streams: usize,
    mode: ConnectivityMode,
    layer: usize,
    stream: usize,
) -> Vec<FeatureRef> {
    if layer == 1 {
        // Layer 1 consumes only its own raw modality.
        return vec![FeatureRef { stream, layer: 0 }];
    }
    match mode {
        ConnectivityMode::Plain => vec![FeatureRef {
            stream,
            layer: layer - 1,
        }],
        ConnectivityMode::DenseWithinStream => (1..layer)
            .rev()
            .map(|l| FeatureRef { stream, layer: l })
            .collect(),
        ConnectivityMode::HyperDense => {
            let mut refs = Vec::with_capacity(num_streams * (layer - 1));
            for l in (1..layer).rev() {
                for s in 1..=num_streams {
                    refs.push(FeatureRef { stream: s, layer: l });
                }
            }
            refs
        }
    }
}
