//! Momentum SGD and the task training loop.

use serde::{Deserialize, Serialize};

use super::{backward_full, forward_full, ModelBundle, Params};
use crate::data::Sample;
use crate::dfs::DfsPolicy;
use crate::error::{Error, Result};
use crate::keyed::{sample_policy, PolicyFamily};
use crate::rng::{derive_seed, tag, SplitMix64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    /// Batch gradients are clipped to this L2 norm; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, batch_size: 32, epochs: 15, momentum: 0.9, grad_clip: 1.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("grad_clip {} must be >= 0", self.grad_clip)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

/// Momentum buffer shaped like the bundle's parameters.
#[derive(Debug, Clone)]
pub struct Momentum {
    velocity: Params,
}

impl Momentum {
    pub fn new(bundle: &ModelBundle) -> Self {
        Self { velocity: bundle.params().zeros_like() }
    }
}

/// `v <- m v + g; w <- w - lr v`.
pub fn sgd_step(bundle: &mut ModelBundle, grads: &Params, lr: f64, momentum: f64, state: &mut Momentum) -> Result<()> {
    if state.velocity.dfs.is_none() && grads.dfs.is_some() {
        state.velocity.dfs = grads.dfs.as_ref().map(|d| d.zeros_like());
    }
    let gs = grads.slices();
    let vs = state.velocity.slices_mut();
    let mut ws = bundle.params_mut().slices_mut();
    if gs.len() != ws.len() || vs.len() != ws.len() {
        return Err(Error::Shape("gradient layout does not match the bundle".into()));
    }
    for ((w, v), g) in ws.iter_mut().zip(vs).zip(gs) {
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub type TrainLog = Vec<EpochLog>;

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

/// Seeded in-place Fisher–Yates shuffle.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut SplitMix64) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

/// Trains on `train`, drawing one policy of `family` per mini-batch and a
/// fresh noise nonce per sample.
pub fn train_task(bundle: &mut ModelBundle, train: &[Sample], family: &PolicyFamily, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, tag::TRAIN, 0));
    let mut state = Momentum::new(bundle);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut rng);
        let (mut total_loss, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let policy = family.policy(sample_policy(family, &mut rng));
            let mut grads = bundle.params().zeros_like();
            for &i in batch {
                let s = &train[i];
                let (probs, cache) = forward_full(&s.image, bundle, policy, rng.next_u64())?;
                correct += (argmax(&probs) == s.label) as usize;
                total_loss += backward_full(bundle, &cache, s.label, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            grads.clip_norm(cfg.grad_clip);
            sgd_step(bundle, &grads, cfg.learning_rate, cfg.momentum, &mut state)?;
        }
        if !bundle.params().is_finite() {
            return Err(Error::Config(format!("training diverged in epoch {epoch}; lower the learning rate")));
        }
        log.push(EpochLog {
            epoch,
            loss: total_loss / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
        });
    }
    Ok(log)
}

/// Nonce for evaluation sample `i`, fixed so evaluations are repeatable.
pub fn eval_nonce(seed: u64, i: usize) -> u64 {
    derive_seed(seed, tag::NONCE, i as u32)
}

/// Top-1 accuracy under `policy`.
pub fn evaluate_accuracy(bundle: &ModelBundle, samples: &[Sample], policy: &DfsPolicy, seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0;
    for (i, s) in samples.iter().enumerate() {
        let probs = bundle.predict(&s.image, policy, eval_nonce(seed, i))?;
        correct += (argmax(&probs) == s.label) as usize;
    }
    Ok(correct as f64 / samples.len() as f64)
}
