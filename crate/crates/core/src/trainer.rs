//! Optimizers, the epoch loop and evaluation metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradMap, Mode};
use crate::builder::{Family, Network};
use crate::cost::{self, FlopConvention};
use crate::error::{ReplError, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{ParamId, Tensor};

/// Labelled images `[N, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rank() != 4 || x.shape()[0] != y.len() {
            return Err(ReplError::Dataset(format!(
                "images {:?} do not match {} labels",
                x.shape(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(ReplError::Dataset(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset { x, y, classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.x.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.y[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (x, y) = self.batch(idx);
        Dataset {
            x,
            y,
            classes: self.classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd {
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    },
    #[serde(rename = "adamw")]
    AdamW {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Optimizer {
    /// SGD for CNNs, AdamW for ViTs.
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Vit => Optimizer::AdamW {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.05,
            },
            _ => Optimizer::Sgd {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr, .. } | Optimizer::AdamW { lr, .. } => lr,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| {
            Err(ReplError::Config {
                key: format!("optimizer.{key}"),
                detail,
            })
        };
        match *self {
            Optimizer::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                if lr.is_nan() || lr <= 0.0 {
                    return bad("lr", format!("must be positive, got {lr}"));
                }
                if !(0.0..1.0).contains(&momentum) {
                    return bad("momentum", format!("must be in [0, 1), got {momentum}"));
                }
                if weight_decay.is_nan() || weight_decay < 0.0 {
                    return bad("weight_decay", format!("must be non-negative, got {weight_decay}"));
                }
            }
            Optimizer::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                if lr.is_nan() || lr <= 0.0 {
                    return bad("lr", format!("must be positive, got {lr}"));
                }
                for (k, b) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(0.0..1.0).contains(&b) {
                        return bad(k, format!("must be in [0, 1), got {b}"));
                    }
                }
                if eps.is_nan() || eps <= 0.0 {
                    return bad("eps", format!("must be positive, got {eps}"));
                }
                if weight_decay.is_nan() || weight_decay < 0.0 {
                    return bad("weight_decay", format!("must be non-negative, got {weight_decay}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub optimizer: Optimizer,
    #[serde(default)]
    pub schedule: Schedule,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub clip: Option<f64>,
    /// Record wall-clock seconds in metrics.
    #[serde(default)]
    pub timing: bool,
}

fn default_batch() -> usize {
    32
}

impl TrainConfig {
    pub fn default_for(family: Family, epochs: usize) -> Self {
        TrainConfig {
            epochs,
            batch_size: default_batch(),
            optimizer: Optimizer::default_for(family),
            schedule: Schedule::Cosine,
            clip: None,
            timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ReplError::Config {
                key: "train.batch_size".into(),
                detail: "must be at least 1".into(),
            });
        }
        if let Some(c) = self.clip.filter(|c| c.is_nan() || *c <= 0.0) {
            return Err(ReplError::Config {
                key: "train.clip".into(),
                detail: format!("must be positive, got {c}"),
            });
        }
        self.optimizer.validate()
    }

    /// Learning rate at global step `t` of `total`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        let base = self.optimizer.lr();
        match self.schedule {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let frac = t as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Optimizer slots and counters. Slots hold the momentum buffer for SGD and
/// the first/second moments for AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub optimizer: Optimizer,
    pub step: u64,
    pub slots: BTreeMap<ParamId, Vec<Tensor>>,
    /// Entries without weight decay: coefficients and norm affines.
    pub exempt: BTreeSet<ParamId>,
}

impl OptimState {
    pub fn new(optimizer: Optimizer, store: &ParamStore) -> Result<Self> {
        optimizer.validate()?;
        let per = match optimizer {
            Optimizer::Sgd { .. } => 1,
            Optimizer::AdamW { .. } => 2,
        };
        let mut slots = BTreeMap::new();
        let mut exempt = BTreeSet::new();
        for (id, e) in store.trainable() {
            slots.insert(id.clone(), vec![Tensor::zeros(e.value.shape()); per]);
            if matches!(e.kind, ParamKind::Coeff | ParamKind::NormAffine) {
                exempt.insert(id.clone());
            }
        }
        Ok(OptimState {
            optimizer,
            step: 0,
            slots,
            exempt,
        })
    }

    /// Slots exist exactly for the trainable entries of `store`.
    pub fn matches(&self, store: &ParamStore) -> bool {
        self.slots.keys().eq(store.trainable().map(|(id, _)| id))
            && self
                .slots
                .iter()
                .all(|(id, s)| s.iter().all(|t| store.get(id).is_ok_and(|v| v.shape() == t.shape())))
    }

    /// Applies one update at learning rate `lr`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap, lr: f64) -> Result<()> {
        if let Some(id) = grads.keys().find(|id| !self.slots.contains_key(*id)) {
            return Err(ReplError::UnknownParam(format!("gradient for non-trainable entry {id}")));
        }
        self.step += 1;
        let t = self.step as i32;
        for (id, slot) in &mut self.slots {
            let zero;
            let g = match grads.get(id) {
                Some(g) => g,
                None => {
                    log::warn!("no gradient for trainable entry {id}; treating it as zero");
                    zero = Tensor::zeros(slot[0].shape());
                    &zero
                }
            };
            let decays = !self.exempt.contains(id);
            let w = store.get_mut(id)?;
            if w.shape() != g.shape() {
                return Err(ReplError::shape("optimizer_step", "gradient", format!("{id}: {:?} vs {:?}", g.shape(), w.shape())));
            }
            match self.optimizer {
                Optimizer::Sgd {
                    momentum,
                    weight_decay,
                    ..
                } => {
                    let wd = if decays { weight_decay } else { 0.0 };
                    let buf = slot[0].data_mut();
                    for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(buf) {
                        *v = momentum * *v + g + wd * *w;
                        *w -= lr * *v;
                    }
                }
                Optimizer::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    ..
                } => {
                    let wd = if decays { weight_decay } else { 0.0 };
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let [m, v] = &mut slot[..] else {
                        unreachable!("adamw keeps two slots")
                    };
                    for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *w -= lr * wd * *w;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `max`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut GradMap, max: f64) -> f64 {
    let norm = grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads.values_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    /// Only with at least five classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
    pub params: u64,
    /// Forward FLOPs per sample.
    pub flops: u64,
}

/// Fraction of rows whose label is among the `k` largest logits. Ties count
/// in the label's favor.
pub fn top_k_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> f64 {
    let c = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            row.iter().filter(|&&v| v > row[y]).count() < k
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Batch order for one epoch; a function of `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut epoch_rng(seed, epoch));
    idx
}

fn net_sizes(net: &Network) -> Result<(u64, u64)> {
    let params = cost::param_count_network(net)?.walked;
    let (per, synth) = cost::flop_count(net, FlopConvention::default());
    Ok((params, per.iter().map(|(_, f)| f).sum::<u64>() + synth))
}

struct Tally {
    loss: f64,
    top1: f64,
    top5: f64,
    n: usize,
}

impl Tally {
    fn new() -> Self {
        Tally {
            loss: 0.0,
            top1: 0.0,
            top5: 0.0,
            n: 0,
        }
    }

    fn add(&mut self, loss: f64, logits: &Tensor, labels: &[usize]) {
        let b = labels.len() as f64;
        self.loss += loss * b;
        self.top1 += top_k_accuracy(logits, labels, 1) * b;
        self.top5 += top_k_accuracy(logits, labels, 5) * b;
        self.n += labels.len();
    }

    fn finish(self, net: &Network, epoch: usize, split: &str, classes: usize, wall: Option<f64>) -> Result<Metrics> {
        let n = self.n as f64;
        let (params, flops) = net_sizes(net)?;
        Ok(Metrics {
            epoch,
            split: split.into(),
            loss: self.loss / n,
            top1: self.top1 / n,
            top5: (classes >= 5).then_some(self.top5 / n),
            wall_seconds: wall,
            params,
            flops,
        })
    }
}

/// One pass over shuffled mini-batches: forward, cross-entropy, backward,
/// optimizer step and running-statistic update per batch. Reported loss and
/// accuracy are averaged over the epoch's train-mode forwards.
pub fn train_epoch(
    net: &mut Network,
    data: &Dataset,
    state: &mut OptimState,
    cfg: &TrainConfig,
    seed: u64,
    epoch: usize,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(ReplError::Dataset("cannot train on an empty dataset".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let order = epoch_order(data.len(), seed, epoch);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs.max(1);
    let mut tally = Tally::new();
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        let (x, y) = data.batch(idx);
        let mut pass = net.pass(&x, &y, Mode::Train)?;
        if !pass.loss.is_finite() {
            return Err(ReplError::Consistency(format!("non-finite loss at epoch {epoch}, batch {b}")));
        }
        if let Some(c) = cfg.clip {
            clip_grad_norm(&mut pass.grads, c);
        }
        let lr = cfg.lr_at(epoch * per_epoch + b, total);
        state.step(&mut net.store, &pass.grads, lr)?;
        net.apply_stats(pass.stats)?;
        tally.add(pass.loss, &pass.logits, &y);
    }
    let wall = cfg.timing.then(|| start.elapsed().as_secs_f64());
    tally.finish(net, epoch, "train", data.classes, wall)
}

/// Eval-mode loss and accuracy over `data` in batches of `batch`.
pub fn evaluate(net: &Network, data: &Dataset, batch: usize, epoch: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(ReplError::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut tally = Tally::new();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let mut tape = crate::autodiff::Tape::new();
        let xv = tape.constant(x);
        let out = net.forward(&mut tape, xv, Mode::Eval)?;
        let loss = tape.cross_entropy(out, &y)?;
        tally.add(tape.value(loss).item(), tape.value(out), &y);
    }
    tally.finish(net, epoch, "test", data.classes, None)
}
