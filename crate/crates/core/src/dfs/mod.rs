//! Distributed feature sharing.
//!
//! Turns an encoder output `z` into `N` balanced, obfuscated shares:
//!
//! ```text
//! LocConf -> OrthoRcb -> split -> per branch (AdaNoise -> ChanPerm -> PatchReorg) -> CrossMix
//! ```
//!
//! LocConf and OrthoRcb act on the full channel space; noise, permutation and
//! patch shifts are branch-specific. Every stage is linear, a permutation, a
//! ReLU, or additive noise, so the pipeline is differentiable with the noise
//! term held constant.

pub mod policy;
pub mod stages;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use policy::{fisher_yates, make_policy, mix_matrix, ortho_matrix, DfsPolicy};
use stages::*;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DfsConfig {
    pub num_branches: usize,
    pub noise_scale: f64,
    pub patch_size: usize,
    pub mix_alpha: f64,
    pub kernel_size: usize,
    pub ablation: Ablation,
}

impl Default for DfsConfig {
    fn default() -> Self {
        Self {
            num_branches: 3,
            noise_scale: 0.3,
            patch_size: 4,
            mix_alpha: 0.25,
            kernel_size: 3,
            ablation: Ablation::None,
        }
    }
}

impl DfsConfig {
    /// Checks the config against an encoder output of `channels x height x width`.
    pub fn validate(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        let n = self.num_branches;
        if n == 0 || !channels.is_multiple_of(n) {
            return Err(Error::Config(format!("encoder channels {channels} not divisible by N={n}")));
        }
        if self.patch_size == 0 || !height.is_multiple_of(self.patch_size) || !width.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "{height}x{width} not divisible by patch size {}",
                self.patch_size
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise scale {} must be >= 0", self.noise_scale)));
        }
        let limit = (n - 1) as f64 / n as f64;
        let alpha_ok = if n == 1 {
            self.mix_alpha == 0.0
        } else {
            self.mix_alpha >= 0.0 && self.mix_alpha < limit
        };
        if !alpha_ok {
            return Err(Error::Config(format!("mix alpha {} outside [0, {limit})", self.mix_alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    LocConf,
    OrthoRcb,
    AdaNoise,
    ChanPerm,
    PatchReorg,
    CrossMix,
}

impl Stage {
    pub const ALL: [Stage; 6] =
        [Stage::LocConf, Stage::OrthoRcb, Stage::AdaNoise, Stage::ChanPerm, Stage::PatchReorg, Stage::CrossMix];

    pub fn name(self) -> &'static str {
        match self {
            Stage::LocConf => "LocConf",
            Stage::OrthoRcb => "OrthoRcb",
            Stage::AdaNoise => "AdaNoise",
            Stage::ChanPerm => "ChanPerm",
            Stage::PatchReorg => "PatchReorg",
            Stage::CrossMix => "CrossMix",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown DFS stage {s:?}")))
    }
}

/// Pipeline variants used by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Ablation {
    #[default]
    None,
    /// The full pipeline with one stage replaced by the identity.
    Without(Stage),
    /// Naive channel split: one seeded shuffle of all channels, then an equal split.
    NaiveChannelSplit,
}

impl Ablation {
    pub fn skips(self, stage: Stage) -> bool {
        match self {
            Ablation::None => false,
            Ablation::Without(s) => s == stage,
            Ablation::NaiveChannelSplit => true,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ablation::None => f.write_str("none"),
            Ablation::Without(s) => write!(f, "without:{}", s.name()),
            Ablation::NaiveChannelSplit => f.write_str("ncs"),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "" => Ok(Ablation::None),
            "ncs" | "NCS" => Ok(Ablation::NaiveChannelSplit),
            other => {
                let stage = other.strip_prefix("without:").unwrap_or(other);
                Ok(Ablation::Without(stage.parse()?))
            }
        }
    }
}

impl TryFrom<String> for Ablation {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> String {
        a.to_string()
    }
}

/// One branch's obfuscated features plus routing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Share {
    pub branch_id: usize,
    pub policy_id: u32,
    pub features: FeatureMap,
}

/// DFS parameters that become trainable under adversarial hardening. When
/// present they override the policy's depthwise kernel and mix matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DfsLearnable {
    pub depthwise_kernel: Vec<f64>,
    pub mix: Vec<f64>,
}

impl DfsLearnable {
    pub fn from_policy(policy: &DfsPolicy) -> Self {
        Self { depthwise_kernel: policy.depthwise_kernel.clone(), mix: policy.mix.clone() }
    }

    pub fn zeros_like(&self) -> Self {
        Self { depthwise_kernel: vec![0.0; self.depthwise_kernel.len()], mix: vec![0.0; self.mix.len()] }
    }
}

/// Intermediate values retained for [`dfs_backward`].
#[derive(Debug, Clone)]
pub struct DfsTrace {
    input: FeatureMap,
    pre_relu: Option<FeatureMap>,
    mix_inputs: Vec<FeatureMap>,
}

/// Noise seed for one branch of one request. The nonce never leaves the client.
pub fn noise_seed(policy: &DfsPolicy, branch: usize, nonce: u64) -> u64 {
    policy.noise_seeds[branch] ^ nonce
}

/// Runs the pipeline on `z`, returning the `N` shares and a trace for backprop.
pub fn dfs_forward(
    z: &FeatureMap,
    policy: &DfsPolicy,
    cfg: &DfsConfig,
    learnable: Option<&DfsLearnable>,
    nonce: u64,
) -> Result<(Vec<Share>, DfsTrace)> {
    let (c, h, w) = z.shape();
    if (c, h, w) != (policy.channels, policy.height, policy.width) || policy.num_branches != cfg.num_branches {
        return Err(Error::Shape(format!(
            "encoder output {:?} does not match policy {:?} with N={}",
            z.shape(),
            (policy.channels, policy.height, policy.width),
            policy.num_branches
        )));
    }
    let n = policy.num_branches;
    let kernel = learnable.map_or(&policy.depthwise_kernel, |l| &l.depthwise_kernel);
    let mix = learnable.map_or(&policy.mix, |l| &l.mix);
    let ab = cfg.ablation;

    if ab == Ablation::NaiveChannelSplit {
        let shuffled = chan_perm(z, &policy.naive_perm)?;
        let parts = split_branches(&shuffled, n)?;
        let trace = DfsTrace { input: z.clone(), pre_relu: None, mix_inputs: Vec::new() };
        return Ok((tag_shares(parts, policy), trace));
    }

    let (activated, pre_relu) = if ab.skips(Stage::LocConf) {
        (z.clone(), None)
    } else {
        let pre = depthwise_conv(z, kernel, policy.kernel_size)?;
        (relu(&pre), Some(pre))
    };
    let mixed = if ab.skips(Stage::OrthoRcb) { activated } else { ortho_rcb(&activated, &policy.ortho)? };

    let mut branches = split_branches(&mixed, n)?;
    for (b, s) in branches.iter_mut().enumerate() {
        if !ab.skips(Stage::AdaNoise) {
            *s = ada_noise(s, noise_seed(policy, b, nonce), cfg.noise_scale)?;
        }
        if !ab.skips(Stage::ChanPerm) {
            *s = chan_perm(s, &policy.chan_perms[b])?;
        }
        if !ab.skips(Stage::PatchReorg) {
            *s = patch_reorg(s, &policy.patch_shifts[b], policy.patch_size)?;
        }
    }

    let (outputs, mix_inputs) = if ab.skips(Stage::CrossMix) {
        (branches, Vec::new())
    } else {
        (cross_mix(&branches, mix)?, branches)
    };
    debug_assert!(outputs.iter().all(FeatureMap::is_finite));
    Ok((tag_shares(outputs, policy), DfsTrace { input: z.clone(), pre_relu, mix_inputs }))
}

fn tag_shares(parts: Vec<FeatureMap>, policy: &DfsPolicy) -> Vec<Share> {
    parts
        .into_iter()
        .enumerate()
        .map(|(branch_id, features)| Share { branch_id, policy_id: policy.policy_id, features })
        .collect()
}

/// Backpropagates share gradients to the encoder output. When `grad_learnable`
/// is given, gradients for the depthwise kernel and mix matrix are
/// accumulated into it.
pub fn dfs_backward(
    trace: &DfsTrace,
    policy: &DfsPolicy,
    cfg: &DfsConfig,
    learnable: Option<&DfsLearnable>,
    grad_shares: &[FeatureMap],
    mut grad_learnable: Option<&mut DfsLearnable>,
) -> Result<FeatureMap> {
    let n = policy.num_branches;
    if grad_shares.len() != n {
        return Err(Error::Shape(format!("{} share gradients for {n} branches", grad_shares.len())));
    }
    let kernel = learnable.map_or(&policy.depthwise_kernel, |l| &l.depthwise_kernel);
    let mix = learnable.map_or(&policy.mix, |l| &l.mix);
    let ab = cfg.ablation;

    if ab == Ablation::NaiveChannelSplit {
        let joined = FeatureMap::concat_channels(grad_shares)?;
        return chan_perm(&joined, &stages::inverse_perm(&policy.naive_perm));
    }

    let mut grads = if ab.skips(Stage::CrossMix) {
        grad_shares.to_vec()
    } else {
        cross_mix_backward(
            &trace.mix_inputs,
            mix,
            grad_shares,
            grad_learnable.as_deref_mut().map(|g| g.mix.as_mut_slice()),
        )?
    };

    let (gh, gw) = policy.grid();
    for (b, g) in grads.iter_mut().enumerate() {
        if !ab.skips(Stage::PatchReorg) {
            *g = patch_reorg(g, &inverse_shifts(&policy.patch_shifts[b], gh, gw), policy.patch_size)?;
        }
        if !ab.skips(Stage::ChanPerm) {
            *g = chan_perm(g, &inverse_perm(&policy.chan_perms[b]))?;
        }
        // AdaNoise: additive term held constant, identity Jacobian.
    }
    let mut g = FeatureMap::concat_channels(&grads)?;
    if !ab.skips(Stage::OrthoRcb) {
        g = channel_mix_transpose(&g, &policy.ortho)?;
    }
    if let Some(pre) = &trace.pre_relu {
        for (gv, pv) in g.data_mut().iter_mut().zip(pre.data()) {
            if *pv <= 0.0 {
                *gv = 0.0;
            }
        }
        let (c, h, w) = trace.input.shape();
        let mut grad_in = FeatureMap::zeros(c, h, w);
        depthwise_conv_backward(
            &trace.input,
            kernel,
            policy.kernel_size,
            &g,
            Some(&mut grad_in),
            grad_learnable.map(|gl| gl.depthwise_kernel.as_mut_slice()),
        );
        g = grad_in;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = SplitMix64::new(seed);
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.gaussian()).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        let cfg = DfsConfig::default();
        assert!(cfg.validate(6, 16, 16).is_ok());
        assert!(cfg.validate(7, 16, 16).is_err());
        assert!(cfg.validate(6, 14, 16).is_err());
        assert!(DfsConfig { mix_alpha: 2.0 / 3.0, ..cfg.clone() }.validate(6, 16, 16).is_err());
        assert!(DfsConfig { mix_alpha: -0.1, ..cfg.clone() }.validate(6, 16, 16).is_err());
        assert!(DfsConfig { kernel_size: 4, ..cfg.clone() }.validate(6, 16, 16).is_err());
        assert!(DfsConfig { num_branches: 1, mix_alpha: 0.0, ..cfg }.validate(6, 16, 16).is_ok());
    }

    #[test]
    fn ablation_parse() {
        assert_eq!("without:PatchReorg".parse::<Ablation>().unwrap(), Ablation::Without(Stage::PatchReorg));
        assert_eq!("patchreorg".parse::<Ablation>().unwrap(), Ablation::Without(Stage::PatchReorg));
        assert_eq!("ncs".parse::<Ablation>().unwrap(), Ablation::NaiveChannelSplit);
        assert!("Nope".parse::<Ablation>().is_err());
        let json = serde_json::to_string(&Ablation::Without(Stage::CrossMix)).unwrap();
        assert_eq!(json, "\"without:CrossMix\"");
    }

    #[test]
    fn noise_free_identity_collapse() {
        let cfg = DfsConfig { noise_scale: 0.0, mix_alpha: 0.0, ..DfsConfig::default() };
        let policy = DfsPolicy::identity(6, 8, 8, &cfg).unwrap();
        let z = random_map(6, 8, 8, 1);
        let (shares, _) = dfs_forward(&z, &policy, &cfg, None, 99).unwrap();
        let relu_z = z.map(|v| v.max(0.0));
        for (i, s) in shares.iter().enumerate() {
            assert_eq!(s.branch_id, i);
            assert_eq!(s.features, relu_z.slice_channels(2 * i, 2 * i + 2).unwrap());
        }
    }

    #[test]
    fn balanced_shapes() {
        let cfg = DfsConfig::default();
        let policy = make_policy(3, &cfg, (12, 16, 16)).unwrap();
        let (shares, _) = dfs_forward(&random_map(12, 16, 16, 2), &policy, &cfg, None, 5).unwrap();
        assert_eq!(shares.len(), 3);
        assert!(shares.iter().all(|s| s.features.shape() == (4, 16, 16)));
        assert!(dfs_forward(&random_map(6, 16, 16, 2), &policy, &cfg, None, 5).is_err());
    }

    #[test]
    fn nonce_changes_noise_only() {
        let cfg = DfsConfig::default();
        let policy = make_policy(3, &cfg, (6, 8, 8)).unwrap();
        let z = random_map(6, 8, 8, 4);
        let (a, _) = dfs_forward(&z, &policy, &cfg, None, 1).unwrap();
        let (b, _) = dfs_forward(&z, &policy, &cfg, None, 1).unwrap();
        let (c, _) = dfs_forward(&z, &policy, &cfg, None, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn skipping_patch_reorg_only_rearranges_patches() {
        let base = DfsConfig { mix_alpha: 0.0, ..DfsConfig::default() };
        let ablated = DfsConfig { ablation: Ablation::Without(Stage::PatchReorg), ..base.clone() };
        let policy = make_policy(8, &base, (6, 16, 16)).unwrap();
        let z = random_map(6, 16, 16, 5);
        let (full, _) = dfs_forward(&z, &policy, &base, None, 3).unwrap();
        let (skip, _) = dfs_forward(&z, &policy, &ablated, None, 3).unwrap();
        let mut differs = false;
        for (f, s) in full.iter().zip(&skip) {
            for c in 0..f.features.channels() {
                let mut a = f.features.channel(c).to_vec();
                let mut b = s.features.channel(c).to_vec();
                differs |= a != b;
                a.sort_by(|x, y| x.partial_cmp(y).unwrap());
                b.sort_by(|x, y| x.partial_cmp(y).unwrap());
                assert_eq!(a, b);
            }
        }
        assert!(differs);
    }

    // Finite-difference check of the whole pipeline adjoint with a random
    // linear read-out of the shares.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = DfsConfig::default();
        let policy = make_policy(21, &cfg, (6, 8, 8)).unwrap();
        let learn = DfsLearnable::from_policy(&policy);
        let z = random_map(6, 8, 8, 6);
        let probes: Vec<FeatureMap> = (0..3).map(|b| random_map(2, 8, 8, 100 + b)).collect();
        let objective = |z: &FeatureMap, l: &DfsLearnable| -> f64 {
            let (shares, _) = dfs_forward(z, &policy, &cfg, Some(l), 7).unwrap();
            shares
                .iter()
                .zip(&probes)
                .map(|(s, p)| s.features.data().iter().zip(p.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let (_, trace) = dfs_forward(&z, &policy, &cfg, Some(&learn), 7).unwrap();
        let mut gl = learn.zeros_like();
        let gz = dfs_backward(&trace, &policy, &cfg, Some(&learn), &probes, Some(&mut gl)).unwrap();
        let eps = 1e-3;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        // Noise std depends on z; the adjoint holds it constant, so perturb
        // z only where it cannot change channel statistics much: compare on a
        // noise-free config for z.
        let quiet = DfsConfig { noise_scale: 0.0, ..cfg.clone() };
        let (_, qtrace) = dfs_forward(&z, &policy, &quiet, Some(&learn), 7).unwrap();
        let gzq = dfs_backward(&qtrace, &policy, &quiet, Some(&learn), &probes, None).unwrap();
        let quiet_obj = |z: &FeatureMap| -> f64 {
            let (shares, _) = dfs_forward(z, &policy, &quiet, Some(&learn), 7).unwrap();
            shares
                .iter()
                .zip(&probes)
                .map(|(s, p)| s.features.data().iter().zip(p.data()).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        for i in (0..z.len()).step_by(7) {
            let mut zp = z.clone();
            zp.data_mut()[i] += eps;
            let mut zm = z.clone();
            zm.data_mut()[i] -= eps;
            let num = (quiet_obj(&zp) - quiet_obj(&zm)) / (2.0 * eps);
            assert!(rel(gzq[i], num) < 1e-3 || (gzq[i] - num).abs() < 1e-7, "z[{i}] {} vs {num}", gzq[i]);
        }
        assert_eq!(gz.shape(), z.shape());
        // A kernel tap moves every pre-activation of its channel; a small step
        // keeps them all on one side of the ReLU kink.
        let keps = 1e-6;
        for i in 0..learn.depthwise_kernel.len() {
            let mut lp = learn.clone();
            lp.depthwise_kernel[i] += keps;
            let mut lm = learn.clone();
            lm.depthwise_kernel[i] -= keps;
            // With noise on, the std of each channel moves with the kernel;
            // the straight-through adjoint ignores that, so check noise-free.
            let f = |l: &DfsLearnable| {
                let (shares, _) = dfs_forward(&z, &policy, &quiet, Some(l), 7).unwrap();
                shares
                    .iter()
                    .zip(&probes)
                    .map(|(s, p)| s.features.data().iter().zip(p.data()).map(|(a, b)| a * b).sum::<f64>())
                    .sum::<f64>()
            };
            let num = (f(&lp) - f(&lm)) / (2.0 * keps);
            let mut gq = learn.zeros_like();
            dfs_backward(&qtrace, &policy, &quiet, Some(&learn), &probes, Some(&mut gq)).unwrap();
            assert!(rel(gq.depthwise_kernel[i], num) < 1e-3, "kernel[{i}] {} vs {num}", gq.depthwise_kernel[i]);
        }
        // Mix gradient is exact even with noise: shares are linear in M.
        for i in 0..learn.mix.len() {
            let mut lp = learn.clone();
            lp.mix[i] += eps;
            let mut lm = learn.clone();
            lm.mix[i] -= eps;
            let num = (objective(&z, &lp) - objective(&z, &lm)) / (2.0 * eps);
            assert!(rel(gl.mix[i], num) < 1e-3, "mix[{i}] {} vs {num}", gl.mix[i]);
        }
    }
}
