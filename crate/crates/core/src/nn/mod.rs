//! Trainable layers over a named parameter store.

pub mod clstm;
pub mod init;
pub mod layers;
pub mod params;

pub use clstm::{clstm_layer, clstm_step, ClstmNodes, ClstmSpec, ClstmState};
pub use layers::{dense, dropout, BatchNormSpec, BatchNormUpdate, DenseSpec, Mode};
pub use params::{Bound, ParamEntry, ParamStore};

/// One entry of a stream's layer stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Clstm(ClstmSpec),
    /// Plain convolution followed by ReLU, for the single-frame baseline.
    Conv { in_channels: usize, out_channels: usize, kernel: usize },
    MaxPool,
    BatchNorm(BatchNormSpec),
    Flatten,
    Dropout { rate: f64 },
    Dense(DenseSpec),
}

impl LayerSpec {
    /// Stored scalars, including batch-norm moving statistics.
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Clstm(s) => s.param_count(),
            LayerSpec::Conv { in_channels, out_channels, kernel } => {
                kernel * kernel * in_channels * out_channels + out_channels
            }
            LayerSpec::BatchNorm(b) => b.param_count(),
            LayerSpec::Dense(d) => d.param_count(),
            LayerSpec::MaxPool | LayerSpec::Flatten | LayerSpec::Dropout { .. } => 0,
        }
    }

    /// Per-frame output shape `[H, W, C]` (or `[F]` once flattened) given
    /// the input shape, or `None` if the layer cannot accept it.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match (self, input) {
            (LayerSpec::Clstm(s), &[h, w, c]) if c == s.in_channels => Some(vec![h, w, s.hidden]),
            (LayerSpec::Conv { in_channels, out_channels, .. }, &[h, w, c]) if c == *in_channels => {
                Some(vec![h, w, *out_channels])
            }
            (LayerSpec::MaxPool, &[h, w, c]) if h % 2 == 0 && w % 2 == 0 => Some(vec![h / 2, w / 2, c]),
            (LayerSpec::BatchNorm(b), s) if s.last() == Some(&b.channels) => Some(s.to_vec()),
            (LayerSpec::Flatten, s) => Some(vec![s.iter().product()]),
            (LayerSpec::Dropout { .. }, s) => Some(s.to_vec()),
            (LayerSpec::Dense(d), &[f]) if f == d.inputs => Some(vec![d.units]),
            _ => None,
        }
    }
}
