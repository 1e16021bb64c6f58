//! Per-frame binary cross-entropy, Adadelta and RMSprop, early stopping and
//! the epoch loop.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;

use crate::data::{augment, load_batch, AugmentConfig, Corpus, SeqRef};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::models::{Batch, Model, ModelKind, Modality};
use crate::nn::{Bound, Mode, ParamStore};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

pub const BCE_CLAMP: f64 = 1e-7;

/// Mean per-frame, per-unit binary cross-entropy with clamped predictions.
pub fn bce_loss(g: &mut Graph, pred: NodeId, target: &Tensor) -> Result<NodeId> {
    g.bce(pred, target, BCE_CLAMP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adadelta,
    Rmsprop,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adadelta => "adadelta",
            Self::Rmsprop => "rmsprop",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adadelta" => Ok(Self::Adadelta),
            "rmsprop" => Ok(Self::Rmsprop),
            o => Err(Error::Config(format!("unknown optimizer {o:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adadelta() -> Self {
        Self {
            kind: OptimizerKind::Adadelta,
            lr: 1.0,
            rho: 0.95,
            eps: 1e-6,
        }
    }

    pub fn rmsprop() -> Self {
        Self {
            kind: OptimizerKind::Rmsprop,
            lr: 1e-3,
            rho: 0.9,
            eps: 1e-7,
        }
    }

    pub fn default_for(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adadelta => Self::adadelta(),
            OptimizerKind::Rmsprop => Self::rmsprop(),
        }
    }
}

/// `E[g²] ← ρE[g²] + (1−ρ)g²`, `Δ = −√(E[Δ²]+ε)/√(E[g²]+ε)·g`,
/// `E[Δ²] ← ρE[Δ²] + (1−ρ)Δ²`, `p ← p + lr·Δ`.
pub fn adadelta_step(p: &mut [f64], g: &[f64], eg2: &mut [f64], ed2: &mut [f64], c: &OptimizerConfig) {
    for i in 0..p.len() {
        eg2[i] = c.rho * eg2[i] + (1.0 - c.rho) * g[i] * g[i];
        let d = -((ed2[i] + c.eps).sqrt() / (eg2[i] + c.eps).sqrt()) * g[i];
        ed2[i] = c.rho * ed2[i] + (1.0 - c.rho) * d * d;
        p[i] += c.lr * d;
    }
}

/// `E[g²] ← ρE[g²] + (1−ρ)g²`, `p ← p − lr·g/√(E[g²]+ε)`.
pub fn rmsprop_step(p: &mut [f64], g: &[f64], eg2: &mut [f64], c: &OptimizerConfig) {
    for i in 0..p.len() {
        eg2[i] = c.rho * eg2[i] + (1.0 - c.rho) * g[i] * g[i];
        p[i] -= c.lr * g[i] / (eg2[i] + c.eps).sqrt();
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    eg2: Vec<f64>,
    ed2: Vec<f64>,
}

/// Accumulators for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    slots: IndexMap<String, Slot>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let slots = params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(name, e)| {
                let n = e.tensor.len();
                let ed2 = if config.kind == OptimizerKind::Adadelta { vec![0.0; n] } else { Vec::new() };
                (name.to_string(), Slot { eg2: vec![0.0; n], ed2 })
            })
            .collect();
        Self { config, slots }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Squared-gradient average of a parameter.
    pub fn accumulator(&self, name: &str) -> Option<&[f64]> {
        self.slots.get(name).map(|s| s.eg2.as_slice())
    }

    /// Apply one update; `grads` pairs parameter names with flat gradients.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Vec<f64>)]) -> Result<()> {
        for (name, g) in grads {
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| Error::Usage(format!("no optimizer slot for {name}")))?;
            let p = params.get_mut(name)?.data_mut();
            if p.len() != g.len() {
                return Err(Error::dim("optimizer step", format!("{name}: {} values vs {} grads", p.len(), g.len())));
            }
            match self.config.kind {
                OptimizerKind::Adadelta => adadelta_step(p, g, &mut slot.eg2, &mut slot.ed2, &self.config),
                OptimizerKind::Rmsprop => rmsprop_step(p, g, &mut slot.eg2, &self.config),
            }
        }
        Ok(())
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [(String, Vec<f64>)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}

/// Patience counter over a monitored loss (lower is better, strict).
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: Option<usize>,
    pub best: f64,
    pub best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    /// Record an epoch's loss; returns (improved, stop).
    pub fn observe(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.wait = 0;
            return (true, false);
        }
        self.wait += 1;
        (false, self.patience.is_some_and(|p| self.wait >= p))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub max_epochs: usize,
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl TrainSchedule {
    /// Batch 16 and Adadelta for one-stream recurrent models, batch 8 for
    /// two-stream, RMSprop for the single-frame baseline.
    pub fn for_model(kind: ModelKind, modality: Modality, seed: u64) -> Self {
        let batch_size = if modality == Modality::Both { 8 } else { 16 };
        let optimizer = match kind {
            ModelKind::FrameCnn => OptimizerConfig::rmsprop(),
            _ => OptimizerConfig::adadelta(),
        };
        Self {
            max_epochs: 100,
            patience: Some(15),
            batch_size,
            optimizer,
            augment: AugmentConfig::ALL,
            clip_norm: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if self.patience.is_some_and(|p| p == 0 || p >= self.max_epochs) {
            return Err(Error::Config("patience must be in [1, max_epochs)".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: History,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Forward in train mode, backpropagate the loss, and return it with the
/// trainable-parameter gradients and batch-norm updates.
pub fn loss_and_grads(
    model: &Model,
    batch: &Batch,
    labels: &Tensor,
    dropout_seed: u64,
) -> Result<(f64, Vec<(String, Vec<f64>)>, Vec<crate::nn::BatchNormUpdate>)> {
    let mut g = Graph::new();
    let bound = Bound::bind(&mut g, &model.params);
    let mut r = stream(dropout_seed);
    let out = model.forward_in(&mut g, &bound, batch, Mode::Train, &mut r, &[])?;
    let loss = bce_loss(&mut g, out.probs, labels)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = g.backward(loss)?;
    let flat = bound
        .iter()
        .map(|(name, node)| {
            let n = g.value(node).len();
            (name.to_string(), grads.get(node).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
        })
        .collect();
    Ok((value, flat, out.bn_updates))
}

/// Mean infer-mode loss over sequences, without augmentation.
pub fn evaluate_loss(model: &Model, corpus: &Corpus, refs: &[SeqRef], batch_size: usize) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::EmptyInput("loss over zero sequences".into()));
    }
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size) {
        let samples: Vec<_> = chunk.iter().map(|&r| corpus.sample(r)).collect();
        let (batch, y) = load_batch(&samples, model.config.modality)?;
        let probs = model.predict(&batch)?;
        let mut g = Graph::new();
        let p = g.constant(probs);
        let l = bce_loss(&mut g, p, &y)?;
        total += g.value(l).data()[0] * chunk.len() as f64;
    }
    Ok(total / refs.len() as f64)
}

/// Per-sequence `[T, 2]` infer-mode probabilities.
pub fn predict_sequences(model: &Model, corpus: &Corpus, refs: &[SeqRef], batch_size: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(batch_size.max(1)) {
        let samples: Vec<_> = chunk.iter().map(|&r| corpus.sample(r)).collect();
        let (batch, _) = load_batch(&samples, model.config.modality)?;
        let probs = model.predict(&batch)?;
        (0..chunk.len()).for_each(|i| out.push(probs.index_axis0(i)));
    }
    Ok(out)
}

fn subjects_of(corpus: &Corpus, refs: &[SeqRef]) -> BTreeSet<u32> {
    refs.iter().map(|&r| corpus.subject(r)).collect()
}

/// Fail unless the given splits have pairwise disjoint subject sets.
pub fn check_disjoint(corpus: &Corpus, splits: &[(&str, &[SeqRef])]) -> Result<()> {
    for (i, (na, a)) in splits.iter().enumerate() {
        for (nb, b) in &splits[i + 1..] {
            let common: Vec<u32> = subjects_of(corpus, a).intersection(&subjects_of(corpus, b)).copied().collect();
            if !common.is_empty() {
                return Err(Error::Protocol(format!("subjects {common:?} appear in both {na} and {nb}")));
            }
        }
    }
    Ok(())
}

/// Train with seeded shuffling and augmentation, monitor validation loss,
/// and restore the parameters of the best epoch. With `run_dir`, writes
/// `history.csv` and `best.ckpt` there.
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    train_refs: &[SeqRef],
    val_refs: &[SeqRef],
    schedule: &TrainSchedule,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if train_refs.is_empty() || val_refs.is_empty() {
        return Err(Error::EmptyInput("training and validation sets must be nonempty".into()));
    }
    check_disjoint(corpus, &[("train", train_refs), ("validation", val_refs)])?;
    let mut opt = OptimizerState::new(schedule.optimizer, &model.params);
    let mut stopper = EarlyStopping::new(schedule.patience);
    let mut best = model.params.clone();
    let mut history = History::default();
    let mut order = train_refs.to_vec();
    for epoch in 1..=schedule.max_epochs {
        order.copy_from_slice(train_refs);
        order.shuffle(&mut stream(derive_seed(schedule.seed, &[epoch as u64, 0])));
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let samples: Vec<_> = chunk
                .iter()
                .enumerate()
                .map(|(k, &r)| {
                    let mut ar = stream(derive_seed(schedule.seed, &[epoch as u64, 1, (bi * schedule.batch_size + k) as u64]));
                    augment(&corpus.sample(r), &mut ar, schedule.augment)
                })
                .collect();
            let (batch, y) = load_batch(&samples, model.config.modality)?;
            let dseed = derive_seed(schedule.seed, &[epoch as u64, 2, bi as u64]);
            let (loss, mut grads, bn) = loss_and_grads(model, &batch, &y, dseed)?;
            if let Some(c) = schedule.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            opt.step(&mut model.params, &grads)?;
            model.apply_bn_updates(&bn)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_loss = evaluate_loss(model, corpus, val_refs, schedule.batch_size)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        log::debug!("{} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}", model.name);
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = model.params.clone();
        }
        if stop {
            break;
        }
    }
    model.params = best;
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        history.write_csv(&dir.join("history.csv"))?;
        model.params.save(&dir.join("best.ckpt"))?;
    }
    Ok(TrainOutcome {
        history,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
    })
}
