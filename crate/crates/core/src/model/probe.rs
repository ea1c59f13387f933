//! Linear probes on frozen branch embeddings.
//!
//! A probe asks how much label information a subset of the server outputs
//! carries on its own: everything upstream is frozen and a fresh softmax
//! regression head is fitted on the chosen branches' embeddings.

use serde::{Deserialize, Serialize};

use super::layers::{softmax, softmax_ce};
use super::train::{argmax, eval_nonce};
use super::ModelBundle;
use crate::data::Sample;
use crate::dfs::DfsPolicy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { iterations: 400, learning_rate: 0.5, momentum: 0.9, seed: 0 }
    }
}

/// Per-sample embeddings of every branch, `[sample][branch][d]`.
pub fn branch_embeddings(bundle: &ModelBundle, samples: &[Sample], policy: &DfsPolicy, seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            bundle
                .client_shares(&s.image, policy, eval_nonce(seed, i))?
                .iter()
                .map(|sh| bundle.branch(sh.branch_id).embed(&sh.features))
                .collect()
        })
        .collect()
}

fn select(embs: &[Vec<Vec<f64>>], branches: &[usize]) -> Vec<Vec<f64>> {
    embs.iter().map(|e| branches.iter().flat_map(|&b| e[b].iter().copied()).collect()).collect()
}

/// Fits a softmax-regression head on the embeddings of `branches` from
/// `train` and returns its accuracy on `test`. Features are standardised
/// with training statistics; optimisation is full-batch momentum gradient
/// descent from zero, so the result is deterministic.
pub fn single_share_probe(
    bundle: &ModelBundle,
    train: &[Sample],
    test: &[Sample],
    policy: &DfsPolicy,
    branches: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if branches.is_empty() || branches.iter().any(|&b| b >= bundle.num_branches()) {
        return Err(Error::InvalidArgument(format!("probe branches {branches:?}")));
    }
    let xtr = select(&branch_embeddings(bundle, train, policy, cfg.seed)?, branches);
    let xte = select(&branch_embeddings(bundle, test, policy, cfg.seed ^ 1)?, branches);
    let ytr: Vec<usize> = train.iter().map(|s| s.label).collect();
    let head = fit_softmax_regression(&xtr, &ytr, bundle.arch.classes, cfg);
    let correct = xte.iter().zip(test).filter(|(x, s)| argmax(&head.logits(x)) == s.label).count();
    Ok(correct as f64 / test.len() as f64)
}

pub(crate) struct LinearHead {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    classes: usize,
    /// `classes x (dim + 1)`, bias last.
    weight: Vec<f64>,
}

impl LinearHead {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        (0..self.classes)
            .map(|c| {
                let row = &self.weight[c * (d + 1)..(c + 1) * (d + 1)];
                row[d] + (0..d).map(|j| row[j] * (x[j] - self.mean[j]) * self.inv_std[j]).sum::<f64>()
            })
            .collect()
    }
}

pub(crate) fn fit_softmax_regression(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig) -> LinearHead {
    let n = x.len() as f64;
    let d = x[0].len();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for row in x {
        for j in 0..d {
            mean[j] += row[j] / n;
        }
    }
    for row in x {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2) / n;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|row| {
            let mut r: Vec<f64> = (0..d).map(|j| (row[j] - mean[j]) * inv_std[j]).collect();
            r.push(1.0);
            r
        })
        .collect();
    let mut head = LinearHead { mean, inv_std: inv_std.clone(), classes, weight: vec![0.0; classes * (d + 1)] };
    let mut vel = vec![0.0; head.weight.len()];
    for _ in 0..cfg.iterations {
        let mut grad = vec![0.0; head.weight.len()];
        for (zi, &yi) in z.iter().zip(y) {
            let logits: Vec<f64> =
                (0..classes).map(|c| crate::linalg::dot(&head.weight[c * (d + 1)..(c + 1) * (d + 1)], zi)).collect();
            let (_, g) = softmax_ce(&softmax(&logits), yi);
            for c in 0..classes {
                if g[c] != 0.0 {
                    for (gw, zv) in grad[c * (d + 1)..(c + 1) * (d + 1)].iter_mut().zip(zi) {
                        *gw += g[c] * zv / n;
                    }
                }
            }
        }
        for ((w, v), g) in head.weight.iter_mut().zip(vel.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v + g;
            *w -= cfg.learning_rate * *v;
        }
    }
    head
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn separable_clusters_are_learned() {
        let mut rng = SplitMix64::new(1);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..300 {
            let c = i % 3;
            x.push(vec![c as f64 * 3.0 + 0.3 * rng.gaussian(), 100.0 + 0.3 * rng.gaussian()]);
            y.push(c);
        }
        let head = fit_softmax_regression(&x, &y, 3, &ProbeConfig::default());
        let acc = x.iter().zip(&y).filter(|(xi, &yi)| argmax(&head.logits(xi)) == yi).count();
        assert_eq!(acc, 300);
    }

    #[test]
    fn noise_features_stay_near_chance() {
        let mut rng = SplitMix64::new(2);
        let x: Vec<Vec<f64>> = (0..2000).map(|_| vec![rng.gaussian(), rng.gaussian()]).collect();
        let y: Vec<usize> = (0..2000).map(|_| rng.below(10)).collect();
        let head = fit_softmax_regression(&x[..1000], &y[..1000], 10, &ProbeConfig::default());
        let acc = x[1000..].iter().zip(&y[1000..]).filter(|(xi, &yi)| argmax(&head.logits(xi)) == yi).count();
        assert!((acc as f64 / 1000.0) < 0.16);
    }
}
