//! Batch normalization, dense and dropout layers.

use rand::Rng;

use super::init::glorot_uniform;
use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormSpec {
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormSpec {
    pub const DEFAULT_MOMENTUM: f64 = 0.99;
    pub const DEFAULT_EPSILON: f64 = 1e-3;

    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    /// gamma, beta, moving mean, moving variance.
    pub fn param_count(&self) -> usize {
        4 * self.channels
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str) {
        let c = self.channels;
        store.insert(format!("{prefix}/gamma"), Tensor::ones(&[c]), true);
        store.insert(format!("{prefix}/beta"), Tensor::zeros(&[c]), true);
        store.insert(format!("{prefix}/moving_mean"), Tensor::zeros(&[c]), false);
        store.insert(format!("{prefix}/moving_var"), Tensor::ones(&[c]), false);
    }

    /// Normalize `x` over every axis but the last. In train mode the batch
    /// statistics are returned for a later [`BatchNormUpdate::apply`].
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        bound: &Bound,
        store: &ParamStore,
        prefix: &str,
        mode: Mode,
    ) -> Result<(NodeId, Option<BatchNormUpdate>)> {
        let gamma = bound.node(&format!("{prefix}/gamma"))?;
        let beta = bound.node(&format!("{prefix}/beta"))?;
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, self.epsilon)?;
                Ok((
                    y,
                    Some(BatchNormUpdate {
                        prefix: prefix.to_string(),
                        momentum: self.momentum,
                        stats,
                    }),
                ))
            }
            Mode::Infer => {
                let mean = store.get(&format!("{prefix}/moving_mean"))?;
                let var = store.get(&format!("{prefix}/moving_var"))?;
                let y = g.batch_norm_infer(x, gamma, beta, mean.data(), var.data(), self.epsilon)?;
                Ok((y, None))
            }
        }
    }
}

/// Pending moving-statistics update from one train-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormUpdate {
    pub prefix: String,
    pub momentum: f64,
    pub stats: BatchStats,
}

impl BatchNormUpdate {
    /// `moving ← momentum·moving + (1 − momentum)·batch`
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        let m = self.momentum;
        for (suffix, batch) in [("moving_mean", &self.stats.mean), ("moving_var", &self.stats.var)] {
            let t = store.get_mut(&format!("{}/{suffix}", self.prefix))?;
            for (v, b) in t.data_mut().iter_mut().zip(batch) {
                *v = m * *v + (1.0 - m) * b;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseSpec {
    pub inputs: usize,
    pub units: usize,
}

impl DenseSpec {
    pub fn param_count(&self) -> usize {
        self.inputs * self.units + self.units
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        store.insert(format!("{prefix}/w"), glorot_uniform(&[self.inputs, self.units], rng), true);
        store.insert(format!("{prefix}/b"), Tensor::zeros(&[self.units]), true);
    }
}

/// `x·W + b` for `x` of shape `[F]` or `[M, F]`.
pub fn dense(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xs = g.shape(x).to_vec();
    let x2 = match xs.len() {
        1 => g.reshape(x, &[1, xs[0]])?,
        2 => x,
        _ => return Err(Error::dim("dense", format!("input must be [F] or [M, F], got {xs:?}"))),
    };
    let y = g.matmul(x2, w)?;
    let y = g.add_bias(y, b)?;
    if xs.len() == 1 {
        let u = g.shape(y)[1];
        g.reshape(y, &[u])
    } else {
        Ok(y)
    }
}

/// Inverted dropout: survivors are scaled by `1/(1 − rate)` in train mode;
/// infer mode and `rate == 0` are the identity.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: NodeId, rate: f64, mode: Mode, rng: &mut R) -> Result<NodeId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = (0..g.value(x).len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    g.mul_const(x, mask)
}
