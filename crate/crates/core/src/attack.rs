//! Inversion attacks on shares.
//!
//! An attacker controls one (or, in the compromise scenario, several)
//! servers, queries the real client pipeline to collect `(share, image)`
//! pairs, fits an inverter, and is scored on held-out images it never saw.
//! Two inverters are provided: closed-form ridge regression and a
//! dense-ReLU-dense network trained by SGD.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Sample, ThreatLevel};
use crate::dfs::{dfs_forward, DfsConfig, DfsPolicy};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::metrics::{psnr, ssim, summarize};
use crate::model::layers::{relu_vec, Dense};
use crate::model::train::{eval_nonce, shuffle};
use crate::model::ModelBundle;
use crate::rng::{derive_seed, tag, SplitMix64};
use crate::tensor::{mse, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackerKind {
    Ridge,
    Mlp,
}

impl fmt::Display for AttackerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackerKind::Ridge => "ridge",
            AttackerKind::Mlp => "mlp",
        })
    }
}

impl FromStr for AttackerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ridge" => Ok(AttackerKind::Ridge),
            "mlp" => Ok(AttackerKind::Mlp),
            other => Err(Error::Config(format!("unknown attacker {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    /// Hidden units beyond the `2 x pixels` that carry the ridge warm start.
    pub extra_hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Fraction of the attacker's pairs held back to pick the best epoch.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            extra_hidden: 64,
            epochs: 6,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Ridge penalty; `None` selects `1e-3 · trace(AᵀA) / d`.
    pub ridge_lambda: Option<f64>,
    pub mlp: MlpConfig,
    /// Sample budget for levels 1 and 2.
    pub budget: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { ridge_lambda: None, mlp: MlpConfig::default(), budget: 2000, seed: 0 }
    }
}

/// Flattened attacker inputs with their ground-truth images.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub inputs: Vec<Vec<f64>>,
    pub images: Vec<FeatureMap>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn dims(&self) -> Result<(usize, usize)> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.inputs[0].len();
        let p = self.images[0].len();
        if self.inputs.iter().any(|x| x.len() != d) || self.images.iter().any(|y| !y.same_shape(&self.images[0])) {
            return Err(Error::Shape("ragged attack pairs".into()));
        }
        Ok((d, p))
    }
}

/// Queries the client pipeline (encoder, then DFS under `cfg`/`policy`) and
/// keeps the concatenated shares of `branches`. Trainable DFS parameters of
/// the bundle are used when `cfg` has the bundle's branch count.
pub fn share_pairs(
    bundle: &ModelBundle,
    cfg: &DfsConfig,
    policy: &DfsPolicy,
    samples: &[Sample],
    branches: &[usize],
    seed: u64,
) -> Result<PairSet> {
    if branches.iter().any(|&b| b >= cfg.num_branches) {
        return Err(Error::InvalidArgument(format!("branches {branches:?} outside N={}", cfg.num_branches)));
    }
    let learn = if cfg.num_branches == bundle.num_branches() { bundle.params().dfs.as_ref() } else { None };
    let mut inputs = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let z = bundle.encode(&s.image)?;
        let (shares, _) = dfs_forward(&z, policy, cfg, learn, eval_nonce(seed, i))?;
        inputs.push(branches.iter().flat_map(|&b| shares[b].features.data().iter().copied()).collect());
    }
    Ok(PairSet { inputs, images: samples.iter().map(|s| s.image.clone()).collect() })
}

/// No-DFS split-inference baseline: the raw encoder output is what leaves
/// the client.
pub fn raw_encoder_pairs(bundle: &ModelBundle, samples: &[Sample]) -> Result<PairSet> {
    let inputs = samples.iter().map(|s| Ok(bundle.encode(&s.image)?.into_data())).collect::<Result<_>>()?;
    Ok(PairSet { inputs, images: samples.iter().map(|s| s.image.clone()).collect() })
}

#[derive(Debug, Clone, PartialEq)]
enum InverterModel {
    /// `(d + 1) x p`; the last row is the bias.
    Linear(Mat),
    Mlp { hidden: Dense, out: Dense },
}

/// A fitted reconstruction model from attacker inputs to images.
#[derive(Debug, Clone, PartialEq)]
pub struct Inverter {
    pub kind: AttackerKind,
    pub input_dim: usize,
    pub image_shape: (usize, usize, usize),
    pub lambda: f64,
    model: InverterModel,
}

impl Inverter {
    /// Raw (unclamped) reconstruction.
    pub fn reconstruct_raw(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim {
            return Err(Error::Shape(format!("inverter expects {} inputs, got {}", self.input_dim, input.len())));
        }
        match &self.model {
            InverterModel::Linear(w) => {
                let p = w.cols();
                let mut out = w.row(self.input_dim).to_vec();
                for (i, &a) in input.iter().enumerate() {
                    if a != 0.0 {
                        for (o, wv) in out.iter_mut().zip(w.row(i)) {
                            *o += a * wv;
                        }
                    }
                }
                debug_assert_eq!(out.len(), p);
                Ok(out)
            }
            InverterModel::Mlp { hidden, out } => out.forward(&relu_vec(&hidden.forward(input)?)),
        }
    }

    /// Reconstruction clamped to the valid pixel range.
    pub fn reconstruct(&self, input: &[f64]) -> Result<FeatureMap> {
        let (c, h, w) = self.image_shape;
        FeatureMap::from_vec(c, h, w, self.reconstruct_raw(input)?.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Linear weights `(d + 1) x p` for ridge inverters.
    pub fn linear_weights(&self) -> Option<&Mat> {
        match &self.model {
            InverterModel::Linear(w) => Some(w),
            InverterModel::Mlp { .. } => None,
        }
    }
}

/// `AᵀA` and `AᵀB` for the bias-augmented design matrix.
pub fn normal_equations(pairs: &PairSet) -> Result<(Mat, Mat)> {
    let (d, p) = pairs.dims()?;
    let da = d + 1;
    let mut gram = Mat::zeros(da, da);
    let mut atb = Mat::zeros(da, p);
    let mut row = vec![0.0; da];
    for (x, y) in pairs.inputs.iter().zip(&pairs.images) {
        row[..d].copy_from_slice(x);
        row[d] = 1.0;
        for i in 0..da {
            let a = row[i];
            if a == 0.0 {
                continue;
            }
            for (g, r) in gram.row_mut(i)[i..].iter_mut().zip(&row[i..]) {
                *g += a * r;
            }
            for (t, b) in atb.row_mut(i).iter_mut().zip(y.data()) {
                *t += a * b;
            }
        }
    }
    for i in 0..da {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    Ok((gram, atb))
}

/// Default ridge penalty `1e-3 · trace(AᵀA) / d`.
pub fn auto_lambda(gram: &Mat) -> f64 {
    1e-3 * gram.trace() / gram.rows() as f64
}

/// Closed-form ridge inverter `W = (AᵀA + λI)⁻¹ AᵀB`, bias by column
/// augmentation, solved by Cholesky.
pub fn fit_ridge(pairs: &PairSet, lambda: Option<f64>) -> Result<Inverter> {
    let (gram, atb) = normal_equations(pairs)?;
    let lambda = match lambda {
        Some(l) if !(l > 0.0) => return Err(Error::InvalidArgument(format!("ridge lambda {l} must be > 0"))),
        Some(l) => l,
        None => auto_lambda(&gram).max(f64::MIN_POSITIVE),
    };
    let mut reg = gram;
    for i in 0..reg.rows() {
        reg[(i, i)] += lambda;
    }
    let l = reg.cholesky()?;
    let mut w = atb;
    Mat::cholesky_solve(&l, &mut w)?;
    Ok(Inverter {
        kind: AttackerKind::Ridge,
        input_dim: pairs.inputs[0].len(),
        image_shape: pairs.images[0].shape(),
        lambda,
        model: InverterModel::Linear(w),
    })
}

fn mean_mse(inv: &Inverter, pairs: &PairSet, idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let r = inv.reconstruct_raw(&pairs.inputs[i])?;
        total += r.iter().zip(pairs.images[i].data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / r.len() as f64;
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Dense-ReLU-dense inverter trained by SGD on pixel MSE.
///
/// The network starts from the ridge solution on all pairs: hidden units `0..p` carry `+Wᵀa + b` and `p..2p` carry `-(Wᵀa + b)`, and
/// the output layer recombines them as `relu(u) - relu(-u) = u`. Extra hidden
/// units start with random input weights and zero output weights. SGD runs
/// on all but a validation slice, and the epoch (including the starting
/// point) with the lowest validation MSE is kept.
pub fn fit_mlp_inverter(pairs: &PairSet, lambda: Option<f64>, cfg: &MlpConfig) -> Result<Inverter> {
    let (d, p) = pairs.dims()?;
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, tag::ATTACK, 0x4d4c));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    shuffle(&mut order, &mut rng);
    let n_val = ((pairs.len() as f64 * cfg.validation_fraction) as usize).min(pairs.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let ridge = fit_ridge(pairs, lambda)?;
    let w = ridge.linear_weights().expect("ridge is linear");

    let h = 2 * p + cfg.extra_hidden;
    let mut hidden = Dense::zeros(d, h);
    let mut out = Dense::zeros(h, p);
    for j in 0..p {
        for i in 0..d {
            hidden.weight[j * d + i] = w[(i, j)];
            hidden.weight[(p + j) * d + i] = -w[(i, j)];
        }
        hidden.bias[j] = w[(d, j)];
        hidden.bias[p + j] = -w[(d, j)];
        out.weight[j * h + j] = 1.0;
        out.weight[j * h + p + j] = -1.0;
    }
    let std = (2.0 / d as f64).sqrt();
    for v in &mut hidden.weight[2 * p * d..] {
        *v = std * rng.gaussian();
    }

    let mut inv = Inverter {
        kind: AttackerKind::Mlp,
        input_dim: d,
        image_shape: pairs.images[0].shape(),
        lambda: ridge.lambda,
        model: InverterModel::Mlp { hidden, out },
    };
    let score = |inv: &Inverter| if val_idx.is_empty() { mean_mse(inv, pairs, train_idx) } else { mean_mse(inv, pairs, val_idx) };
    let mut best = (score(&inv)?, inv.clone());
    let mut train_order = train_idx.to_vec();
    let InverterModel::Mlp { hidden: h0, out: o0 } = &inv.model else { unreachable!() };
    let (mut vh, mut vo) = (Dense::zeros(h0.nin, h0.nout), Dense::zeros(o0.nin, o0.nout));
    for _ in 0..cfg.epochs {
        shuffle(&mut train_order, &mut rng);
        for batch in train_order.chunks(cfg.batch_size.max(1)) {
            let InverterModel::Mlp { hidden, out } = &mut inv.model else { unreachable!() };
            let (mut gh, mut go) = (Dense::zeros(hidden.nin, hidden.nout), Dense::zeros(out.nin, out.nout));
            for &i in batch {
                let x = &pairs.inputs[i];
                let pre = hidden.forward(x)?;
                let act = relu_vec(&pre);
                let y = out.forward(&act)?;
                let g: Vec<f64> = y.iter().zip(pairs.images[i].data()).map(|(a, b)| 2.0 * (a - b) / p as f64).collect();
                let mut ga = out.backward(&act, &g, &mut go, true).unwrap();
                crate::model::layers::relu_backward_in_place(&pre, &mut ga);
                hidden.backward(x, &ga, &mut gh, false);
            }
            let scale = 1.0 / batch.len() as f64;
            for (layer, grad, vel) in [(&mut *hidden, &gh, &mut vh), (&mut *out, &go, &mut vo)] {
                for (w, (g, v)) in layer.weight.iter_mut().zip(grad.weight.iter().zip(vel.weight.iter_mut())) {
                    *v = cfg.momentum * *v + g * scale;
                    *w -= cfg.learning_rate * *v;
                }
                for (w, (g, v)) in layer.bias.iter_mut().zip(grad.bias.iter().zip(vel.bias.iter_mut())) {
                    *v = cfg.momentum * *v + g * scale;
                    *w -= cfg.learning_rate * *v;
                }
            }
        }
        let s = score(&inv)?;
        if s < best.0 {
            best = (s, inv.clone());
        }
    }
    Ok(best.1)
}

pub fn fit_inverter(kind: AttackerKind, pairs: &PairSet, cfg: &AttackConfig) -> Result<Inverter> {
    match kind {
        AttackerKind::Ridge => fit_ridge(pairs, cfg.ridge_lambda),
        AttackerKind::Mlp => fit_mlp_inverter(pairs, cfg.ridge_lambda, &cfg.mlp),
    }
}

/// Per-sample reconstruction scores.
#[derive(Debug, Clone, Default)]
pub struct Scores {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mse: Vec<f64>,
}

impl Scores {
    fn extend(&mut self, other: &Scores) {
        self.psnr.extend(&other.psnr);
        self.ssim.extend(&other.ssim);
        self.mse.extend(&other.mse);
    }
}

pub fn score_inverter(inv: &Inverter, pairs: &PairSet) -> Result<Scores> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut s = Scores::default();
    for (x, img) in pairs.inputs.iter().zip(&pairs.images) {
        let r = inv.reconstruct(x)?;
        s.psnr.push(psnr(img, &r, 1.0)?);
        s.ssim.push(ssim(img, &r)?);
        s.mse.push(mse(img, &r)?);
    }
    Ok(s)
}

/// One line of an attack report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    /// `b0`, `b0+b1`, ... for the branches fed to the inverter, or `pooled`.
    pub scope: String,
    pub samples: usize,
    pub psnr: f64,
    pub psnr_std: f64,
    pub ssim: f64,
    pub ssim_std: f64,
    pub mse: f64,
    pub mse_std: f64,
    /// Reserved so tables keep the usual column set; never computed here.
    pub lpips: Option<f64>,
}

impl AttackRow {
    pub fn from_scores(scope: impl Into<String>, s: &Scores) -> Self {
        let (psnr, psnr_std) = summarize(&s.psnr);
        let (ssim, ssim_std) = summarize(&s.ssim);
        let (mse, mse_std) = summarize(&s.mse);
        Self { scope: scope.into(), samples: s.ssim.len(), psnr, psnr_std, ssim, ssim_std, mse, mse_std, lpips: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// Threat level, or 0 for diagnostic runs outside the three levels.
    pub level: u8,
    pub attacker: AttackerKind,
    /// Policy id whose shares were attacked.
    pub key_id: u32,
    /// Policy id the inverter was trained under, when different (cross-key).
    pub trained_key_id: Option<u32>,
    pub rows: Vec<AttackRow>,
}

impl AttackReport {
    pub fn row(&self, scope: &str) -> Option<&AttackRow> {
        self.rows.iter().find(|r| r.scope == scope)
    }

    /// The pooled row, or the only row.
    pub fn headline(&self) -> &AttackRow {
        self.row("pooled").unwrap_or(&self.rows[0])
    }

    /// Line records, one per row. Field order: `level attacker key trained_key
    /// scope n psnr psnr_std ssim ssim_std mse mse_std lpips`.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "attack level={} attacker={} key={} trained_key={} scope={} n={} psnr={:.6} psnr_std={:.6} ssim={:.6} ssim_std={:.6} mse={:.8} mse_std={:.8} lpips={}\n",
                self.level,
                self.attacker,
                self.key_id,
                self.trained_key_id.map_or("-".to_string(), |k| k.to_string()),
                r.scope,
                r.samples,
                r.psnr,
                r.psnr_std,
                r.ssim,
                r.ssim_std,
                r.mse,
                r.mse_std,
                r.lpips.map_or("NA".to_string(), |v| format!("{v:.6}")),
            ));
        }
        out
    }
}

pub fn scope_name(branches: &[usize]) -> String {
    branches.iter().map(|b| format!("b{b}")).collect::<Vec<_>>().join("+")
}

/// Evaluates a fitted inverter on held-out pairs.
pub fn evaluate_attack(inv: &Inverter, eval: &PairSet, scope: &str, level: u8, key_id: u32) -> Result<AttackReport> {
    let s = score_inverter(inv, eval)?;
    Ok(AttackReport { level, attacker: inv.kind, key_id, trained_key_id: None, rows: vec![AttackRow::from_scores(scope, &s)] })
}

/// One inverter per branch of `policy`, each fitted on `attacker` samples and
/// scored on `eval` samples, plus a pooled row over all branches.
pub fn per_branch_attack(
    bundle: &ModelBundle,
    policy: &DfsPolicy,
    attacker: &[Sample],
    eval: &[Sample],
    level: ThreatLevel,
    kind: AttackerKind,
    cfg: &AttackConfig,
) -> Result<AttackReport> {
    let mut rows = Vec::new();
    let mut pooled = Scores::default();
    for b in 0..bundle.num_branches() {
        let train = share_pairs(bundle, &bundle.dfs, policy, attacker, &[b], cfg.seed)?;
        let test = share_pairs(bundle, &bundle.dfs, policy, eval, &[b], cfg.seed ^ 0xe7a1)?;
        let inv = fit_inverter(kind, &train, cfg)?;
        let s = score_inverter(&inv, &test)?;
        rows.push(AttackRow::from_scores(scope_name(&[b]), &s));
        pooled.extend(&s);
    }
    rows.push(AttackRow::from_scores("pooled", &pooled));
    Ok(AttackReport { level: level as u8, attacker: kind, key_id: policy.policy_id, trained_key_id: None, rows })
}

/// Inverters fitted under `train_policy` and scored on shares produced under
/// `eval_policy`.
pub fn cross_key_attack(
    bundle: &ModelBundle,
    train_policy: &DfsPolicy,
    eval_policy: &DfsPolicy,
    attacker: &[Sample],
    eval: &[Sample],
    kind: AttackerKind,
    cfg: &AttackConfig,
) -> Result<AttackReport> {
    let mut rows = Vec::new();
    let mut pooled = Scores::default();
    for b in 0..bundle.num_branches() {
        let train = share_pairs(bundle, &bundle.dfs, train_policy, attacker, &[b], cfg.seed)?;
        let test = share_pairs(bundle, &bundle.dfs, eval_policy, eval, &[b], cfg.seed ^ 0xe7a1)?;
        let inv = fit_inverter(kind, &train, cfg)?;
        let s = score_inverter(&inv, &test)?;
        rows.push(AttackRow::from_scores(scope_name(&[b]), &s));
        pooled.extend(&s);
    }
    rows.push(AttackRow::from_scores("pooled", &pooled));
    Ok(AttackReport {
        level: 0,
        attacker: kind,
        key_id: eval_policy.policy_id,
        trained_key_id: Some(train_policy.policy_id),
        rows,
    })
}

/// Checks that `compromised` of `n` servers respects the honest-majority
/// assumption (at most half), unless `allow_majority` is set for a
/// diagnostic run.
pub fn check_compromise(compromised: usize, n: usize, allow_majority: bool) -> Result<()> {
    if compromised == 0 || compromised > n {
        return Err(Error::InvalidArgument(format!("{compromised} of {n} servers")));
    }
    if 2 * compromised > n && !allow_majority {
        return Err(Error::ThreatModel(format!(
            "{compromised} of {n} servers is more than half; the threat model assumes an honest majority"
        )));
    }
    Ok(())
}

/// The attacker pools the shares of the first `compromised` servers of an
/// `N`-server deployment (`cfg.num_branches`, `policy` built for it) and fits
/// one inverter on their concatenation.
#[allow(clippy::too_many_arguments)]
pub fn compromise_scenario(
    bundle: &ModelBundle,
    cfg: &DfsConfig,
    policy: &DfsPolicy,
    compromised: usize,
    allow_majority: bool,
    attacker: &[Sample],
    eval: &[Sample],
    kind: AttackerKind,
    attack_cfg: &AttackConfig,
) -> Result<AttackReport> {
    check_compromise(compromised, cfg.num_branches, allow_majority)?;
    let branches: Vec<usize> = (0..compromised).collect();
    let train = share_pairs(bundle, cfg, policy, attacker, &branches, attack_cfg.seed)?;
    let test = share_pairs(bundle, cfg, policy, eval, &branches, attack_cfg.seed ^ 0xe7a1)?;
    let inv = fit_inverter(kind, &train, attack_cfg)?;
    let scope = format!("{compromised}of{}", cfg.num_branches);
    evaluate_attack(&inv, &test, &scope, 0, policy.policy_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    fn identity_pairs(n: usize, seed: u64) -> PairSet {
        let s = synth_generate(&SynthSpec { size: 8, seed, ..SynthSpec::default() }, n);
        PairSet { inputs: s.iter().map(|x| x.image.data().to_vec()).collect(), images: s.into_iter().map(|x| x.image).collect() }
    }

    #[test]
    fn ridge_on_identity_leak_is_exact() {
        let train = identity_pairs(400, 1);
        let test = identity_pairs(100, 2);
        let inv = fit_ridge(&train, Some(1e-6)).unwrap();
        let s = score_inverter(&inv, &test).unwrap();
        assert!(summarize(&s.mse).0 < 1e-6);
        assert!(fit_ridge(&train, Some(0.0)).is_err());
        assert!(fit_ridge(&train, Some(-1.0)).is_err());
    }

    #[test]
    fn ridge_matches_explicit_inverse() {
        let mut rng = SplitMix64::new(3);
        let (n, d) = (8, 4);
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gaussian()).collect()).collect();
        let images: Vec<FeatureMap> =
            (0..n).map(|_| FeatureMap::from_vec(1, 1, 3, (0..3).map(|_| rng.uniform()).collect()).unwrap()).collect();
        let pairs = PairSet { inputs: inputs.clone(), images: images.clone() };
        let lambda = 0.1;
        let inv = fit_ridge(&pairs, Some(lambda)).unwrap();
        let a = Mat::from_fn(n, d + 1, |i, j| if j == d { 1.0 } else { inputs[i][j] });
        let b = Mat::from_fn(n, 3, |i, j| images[i].data()[j]);
        let at = a.transpose();
        let mut reg = at.matmul(&a).unwrap();
        for i in 0..=d {
            reg[(i, i)] += lambda;
        }
        let w = reg.inverse().unwrap().matmul(&at.matmul(&b).unwrap()).unwrap();
        assert!(inv.linear_weights().unwrap().max_abs_diff(&w) < 1e-6);
    }

    #[test]
    fn normal_equation_residual() {
        let train = identity_pairs(300, 4);
        let inv = fit_ridge(&train, None).unwrap();
        let (gram, atb) = normal_equations(&train).unwrap();
        let mut reg = gram;
        for i in 0..reg.rows() {
            reg[(i, i)] += inv.lambda;
        }
        let lhs = reg.matmul(inv.linear_weights().unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&atb) < 1e-5 * atb.max_abs());
    }

    #[test]
    fn noise_shares_reveal_nothing() {
        let train = identity_pairs(600, 5);
        let test = identity_pairs(200, 6);
        let mut rng = SplitMix64::new(7);
        let mut noise = |p: &PairSet| PairSet {
            inputs: p.inputs.iter().map(|x| x.iter().map(|_| 10.0 * rng.gaussian()).collect()).collect(),
            images: p.images.clone(),
        };
        let (ntrain, ntest) = (noise(&train), noise(&test));
        let inv = fit_ridge(&ntrain, None).unwrap();
        let s = summarize(&score_inverter(&inv, &ntest).unwrap().ssim).0;
        assert!(s.abs() < 0.1, "{s}");
    }

    #[test]
    fn mlp_inverter_on_identity_leak() {
        let train = identity_pairs(600, 8);
        let test = identity_pairs(150, 9);
        let cfg = MlpConfig { epochs: 3, extra_hidden: 16, ..MlpConfig::default() };
        let mlp = fit_mlp_inverter(&train, None, &cfg).unwrap();
        let ridge = fit_ridge(&train, None).unwrap();
        let m = summarize(&score_inverter(&mlp, &test).unwrap().mse).0;
        let r = summarize(&score_inverter(&ridge, &test).unwrap().mse).0;
        assert!(m < 1e-3, "{m}");
        assert!(m <= r * 1.0001, "mlp {m} vs ridge {r}");
        assert_eq!(mlp, fit_mlp_inverter(&train, None, &cfg).unwrap());
    }

    #[test]
    fn compromise_bounds() {
        assert!(check_compromise(1, 3, false).is_ok());
        assert!(check_compromise(3, 6, false).is_ok());
        assert!(matches!(check_compromise(2, 3, false), Err(Error::ThreatModel(_))));
        assert!(check_compromise(3, 3, true).is_ok());
        assert!(check_compromise(0, 3, true).is_err());
    }

    #[test]
    fn report_records() {
        let r = AttackReport {
            level: 2,
            attacker: AttackerKind::Ridge,
            key_id: 0,
            trained_key_id: None,
            rows: vec![AttackRow::from_scores("b0", &Scores { psnr: vec![20.0], ssim: vec![0.5], mse: vec![0.01] })],
        };
        assert_eq!(
            r.to_records(),
            "attack level=2 attacker=ridge key=0 trained_key=- scope=b0 n=1 psnr=20.000000 psnr_std=0.000000 ssim=0.500000 ssim_std=0.000000 mse=0.01000000 mse_std=0.00000000 lpips=NA\n"
        );
    }
}
