//! Adversarial hardening.
//!
//! Each round refits one ridge inverter per branch on the current shares of
//! the training set, freezes them, and then trains the defender on
//! `task + λ · L_ar`, where `L_ar` rewards the frozen inverters' failure.
//! Gradients of `L_ar` reach the encoder and the trainable DFS parameters
//! (depthwise kernel and mix matrix) through the linear inverters.

use serde::{Deserialize, Serialize};

use crate::attack::{fit_ridge, score_inverter, share_pairs, Inverter};
use crate::data::Sample;
use crate::dfs::DfsPolicy;
use crate::error::{Error, Result};
use crate::metrics::{ssim_global, ssim_global_grad, summarize};
use crate::model::train::{argmax, eval_nonce, sgd_step, shuffle, Momentum};
use crate::model::{backward_with_share_grads, evaluate_accuracy, forward_full, ModelBundle};
use crate::rng::{derive_seed, tag, SplitMix64};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtConfig {
    pub lambda: f64,
    pub rounds: usize,
    pub defender_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Batch gradient L2 clip; 0 disables.
    pub grad_clip: f64,
    /// Ridge penalty of the per-round attackers; `None` is the scale-free default.
    pub ridge_lambda: Option<f64>,
    pub seed: u64,
}

impl Default for AtConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            rounds: 5,
            defender_epochs: 3,
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 32,
            grad_clip: 1.0,
            ridge_lambda: None,
            seed: 0,
        }
    }
}

impl AtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("AT lambda {} must be >= 0", self.lambda)));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch_size == 0 || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("AT optimiser settings out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtRound {
    pub round: usize,
    /// Test accuracy under the hardened policy.
    pub accuracy: f64,
    /// Windowed SSIM of a freshly refit ridge attacker, pooled over branches.
    pub ssim: f64,
    pub mse: f64,
    pub psnr: f64,
    /// Mean `L_ar` seen by the defender during the round (0 for round 0).
    pub ar_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtLog {
    pub lambda: f64,
    pub rounds: Vec<AtRound>,
}

impl AtLog {
    /// One `at round=..` record per entry.
    pub fn to_records(&self) -> String {
        self.rounds
            .iter()
            .map(|r| {
                format!(
                    "at lambda={} round={} accuracy={:.6} ssim={:.6} mse={:.8} psnr={:.6} ar_loss={:.6}\n",
                    self.lambda, r.round, r.accuracy, r.ssim, r.mse, r.psnr, r.ar_loss
                )
            })
            .collect()
    }
}

/// `(1/N) Σ_i [SSIM_global(x, x̃_i) − MSE(x, x̃_i)]`.
pub fn loss_ar(x: &FeatureMap, recons: &[FeatureMap]) -> Result<f64> {
    Ok(loss_ar_grad(x, recons)?.0)
}

/// `loss_ar` with its gradient with respect to every reconstruction.
pub fn loss_ar_grad(x: &FeatureMap, recons: &[FeatureMap]) -> Result<(f64, Vec<FeatureMap>)> {
    if recons.is_empty() {
        return Err(Error::InvalidArgument("loss_ar needs at least one reconstruction".into()));
    }
    let n = recons.len() as f64;
    let p = x.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(recons.len());
    for r in recons {
        x.ensure_shape(r, "reconstruction")?;
        let (s, mut g) = ssim_global_grad(x, r)?;
        let mut m = 0.0;
        for ((gv, rv), xv) in g.data_mut().iter_mut().zip(r.data()).zip(x.data()) {
            m += (rv - xv) * (rv - xv);
            *gv = (*gv - 2.0 * (rv - xv) / p) / n;
        }
        total += s - m / p;
        grads.push(g);
    }
    Ok((total / n, grads))
}

pub fn defender_loss(task_loss: f64, ar_loss: f64, lambda: f64) -> f64 {
    task_loss + lambda * ar_loss
}

fn refit_attackers(bundle: &ModelBundle, policy: &DfsPolicy, samples: &[Sample], cfg: &AtConfig, round: usize) -> Result<Vec<Inverter>> {
    (0..bundle.num_branches())
        .map(|b| {
            let pairs = share_pairs(bundle, &bundle.dfs, policy, samples, &[b], derive_seed(cfg.seed, tag::ATTACK, round as u32))?;
            fit_ridge(&pairs, cfg.ridge_lambda)
        })
        .collect()
}

fn measure_round(
    bundle: &ModelBundle,
    policy: &DfsPolicy,
    train: &[Sample],
    eval: &[Sample],
    cfg: &AtConfig,
    round: usize,
    ar_loss: f64,
) -> Result<AtRound> {
    let attackers = refit_attackers(bundle, policy, train, cfg, round)?;
    let (mut ssim, mut mse, mut psnr) = (Vec::new(), Vec::new(), Vec::new());
    for (b, inv) in attackers.iter().enumerate() {
        let test = share_pairs(bundle, &bundle.dfs, policy, eval, &[b], cfg.seed ^ 0xe7a1)?;
        let s = score_inverter(inv, &test)?;
        ssim.extend(s.ssim);
        mse.extend(s.mse);
        psnr.extend(s.psnr);
    }
    Ok(AtRound {
        round,
        accuracy: evaluate_accuracy(bundle, eval, policy, cfg.seed)?,
        ssim: summarize(&ssim).0,
        mse: summarize(&mse).0,
        psnr: summarize(&psnr).0,
        ar_loss,
    })
}

/// Share-space gradient of `λ · L_ar` through a frozen linear inverter.
fn share_grad(inv: &Inverter, g_recon: &FeatureMap, share: &FeatureMap, scale: f64) -> FeatureMap {
    let w = inv.linear_weights().expect("AT attackers are linear");
    let data = (0..share.len()).map(|i| scale * crate::linalg::dot(w.row(i), g_recon.data())).collect();
    let (c, h, wd) = share.shape();
    FeatureMap::from_vec(c, h, wd, data).expect("share shape")
}

/// Runs `cfg.rounds` attacker/defender rounds against `policy` and returns
/// the log: round 0 is the starting point, then one entry per round. The
/// log is also stored on the bundle.
pub fn at_train(bundle: &mut ModelBundle, policy: &DfsPolicy, train: &[Sample], eval: &[Sample], cfg: &AtConfig) -> Result<AtLog> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let chance = 1.0 / bundle.arch.classes as f64;
    let start_acc = evaluate_accuracy(bundle, eval, policy, cfg.seed)?;
    if start_acc < 2.0 * chance {
        return Err(Error::InvalidArgument(format!(
            "bundle looks untrained (accuracy {start_acc:.3}); train it before hardening"
        )));
    }
    bundle.enable_dfs_learning(policy);

    let mut rounds = vec![measure_round(bundle, policy, train, eval, cfg, 0, 0.0)?];
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, tag::TRAIN, 0xa7));
    let mut state = Momentum::new(bundle);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for round in 1..=cfg.rounds {
        let attackers = refit_attackers(bundle, policy, train, cfg, round)?;
        let (mut ar_sum, mut ar_count) = (0.0, 0usize);
        for _ in 0..cfg.defender_epochs {
            shuffle(&mut order, &mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let mut grads = bundle.params().zeros_like();
                for &i in batch {
                    let s = &train[i];
                    let (_, cache) = forward_full(&s.image, bundle, policy, rng.next_u64())?;
                    let extra = if cfg.lambda > 0.0 {
                        let raw = attackers
                            .iter()
                            .zip(&cache.shares)
                            .map(|(inv, sh)| {
                                let (c, h, w) = inv.image_shape;
                                FeatureMap::from_vec(c, h, w, inv.reconstruct_raw(sh.data())?)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        // The loss is defined on images in [0, 1]; the clamp has zero
                        // slope where it saturates.
                        let recons: Vec<FeatureMap> = raw.iter().map(|r| r.map(|v| v.clamp(0.0, 1.0))).collect();
                        let (ar, mut g) = loss_ar_grad(&s.image, &recons)?;
                        for (gr, r) in g.iter_mut().zip(&raw) {
                            for (gv, &rv) in gr.data_mut().iter_mut().zip(r.data()) {
                                if !(0.0..=1.0).contains(&rv) {
                                    *gv = 0.0;
                                }
                            }
                        }
                        ar_sum += ar;
                        ar_count += 1;
                        Some(
                            attackers
                                .iter()
                                .zip(&g)
                                .zip(&cache.shares)
                                .map(|((inv, gr), sh)| share_grad(inv, gr, sh, cfg.lambda))
                                .collect::<Vec<_>>(),
                        )
                    } else {
                        None
                    };
                    backward_with_share_grads(bundle, &cache, s.label, 1.0, extra.as_deref(), &mut grads)?;
                }
                grads.scale(1.0 / batch.len() as f64);
                grads.clip_norm(cfg.grad_clip);
                sgd_step(bundle, &grads, cfg.learning_rate, cfg.momentum, &mut state)?;
            }
            if !bundle.params().is_finite() {
                return Err(Error::Config(format!("hardening diverged in round {round}; lower the learning rate")));
            }
        }
        let ar = if ar_count > 0 { ar_sum / ar_count as f64 } else { 0.0 };
        rounds.push(measure_round(bundle, policy, train, eval, cfg, round, ar)?);
    }
    let log = AtLog { lambda: cfg.lambda, rounds };
    bundle.at_log = Some(log.clone());
    Ok(log)
}

/// Accuracy of the bundle on `samples` plus the mean global-SSIM `L_ar` of
/// the given frozen attackers; used by tests and the CLI curve printer.
pub fn ar_objective(bundle: &ModelBundle, policy: &DfsPolicy, attackers: &[Inverter], samples: &[Sample], seed: u64) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let (probs, cache) = forward_full(&s.image, bundle, policy, eval_nonce(seed, i))?;
        correct += (argmax(&probs) == s.label) as usize;
        let mut acc = 0.0;
        for (inv, sh) in attackers.iter().zip(&cache.shares) {
            let r = inv.reconstruct(sh.data())?;
            acc += ssim_global(&s.image, &r)? - crate::tensor::mse(&s.image, &r)?;
        }
        total += acc / attackers.len() as f64;
    }
    Ok((correct as f64 / samples.len() as f64, total / samples.len() as f64))
}
