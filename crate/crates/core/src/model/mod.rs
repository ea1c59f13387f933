//! Client encoder, server branch networks, client fusion head, and the full
//! forward/backward pass through the DFS pipeline.
//!
//! ```text
//! x --encoder--> z --DFS--> s_1..s_N --branch_i--> e_i --concat--> fusion --> softmax
//! ```
//!
//! The encoder is a single linear convolution. Each branch is
//! conv-ReLU-conv-ReLU-global-average-pool-dense. Fusion is
//! dense-ReLU-dense-softmax. DFS parameters are fixed by the policy unless
//! [`Params::dfs`] holds trainable copies (adversarial hardening).

pub mod io;
pub mod layers;
pub mod probe;
pub mod train;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use layers::{Conv2d, Dense};
pub use probe::{single_share_probe, ProbeConfig};
pub use train::{evaluate_accuracy, sgd_step, train_task, EpochLog, Momentum, TrainConfig, TrainLog};

use crate::at::AtLog;
use crate::dfs::{dfs_backward, dfs_forward, DfsConfig, DfsLearnable, DfsPolicy, DfsTrace, Share};
use crate::error::{shape_err, Error, Result};
use crate::keyed::{family_create, PolicyFamily};
use crate::rng::{derive_seed, tag, SplitMix64};
use crate::tensor::FeatureMap;
use layers::*;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub encoder_channels: usize,
    pub encoder_kernel: usize,
    /// Encoder stride. Shares live on the `ceil(H/s) x ceil(W/s)` grid.
    pub encoder_stride: usize,
    /// Output channels of the two branch convolutions.
    pub branch_channels: [usize; 2],
    pub branch_kernel: usize,
    /// Width `d` of each branch embedding.
    pub embed_dim: usize,
    pub fusion_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            height: 16,
            width: 16,
            classes: 10,
            encoder_channels: 6,
            encoder_kernel: 3,
            encoder_stride: 2,
            branch_channels: [6, 12],
            branch_kernel: 3,
            embed_dim: 4,
            fusion_hidden: 32,
        }
    }
}

impl ArchConfig {
    pub fn encoder_shape(&self) -> (usize, usize, usize) {
        let s = self.encoder_stride.max(1);
        (self.encoder_channels, self.height.div_ceil(s), self.width.div_ceil(s))
    }

    pub fn validate(&self, dfs: &DfsConfig) -> Result<()> {
        let positive = [
            self.in_channels,
            self.height,
            self.width,
            self.classes,
            self.encoder_channels,
            self.encoder_stride,
            self.branch_channels[0],
            self.branch_channels[1],
            self.embed_dim,
            self.fusion_hidden,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("architecture sizes must be positive".into()));
        }
        if self.encoder_kernel.is_multiple_of(2) || self.branch_kernel.is_multiple_of(2) {
            return Err(Error::Config("convolution kernels must be odd".into()));
        }
        let (c, h, w) = self.encoder_shape();
        dfs.validate(c, h, w)
    }
}

/// One server-side branch network.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub head: Dense,
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    input: FeatureMap,
    pre1: FeatureMap,
    act1: FeatureMap,
    pre2: FeatureMap,
    pooled: Vec<f64>,
}

impl Branch {
    fn init(arch: &ArchConfig, cin: usize, rng: &mut SplitMix64) -> Self {
        let [c1, c2] = arch.branch_channels;
        Self {
            conv1: Conv2d::init(cin, c1, arch.branch_kernel, rng),
            conv2: Conv2d::init(c1, c2, arch.branch_kernel, rng),
            head: Dense::init(c2, arch.embed_dim, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            conv1: Conv2d::zeros(self.conv1.cin, self.conv1.cout, self.conv1.k),
            conv2: Conv2d::zeros(self.conv2.cin, self.conv2.cout, self.conv2.k),
            head: Dense::zeros(self.head.nin, self.head.nout),
        }
    }

    pub fn forward(&self, share: &FeatureMap) -> Result<(Vec<f64>, BranchCache)> {
        let pre1 = self.conv1.forward(share)?;
        let act1 = pre1.map(|v| v.max(0.0));
        let pre2 = self.conv2.forward(&act1)?;
        let pooled = global_avg_pool(&pre2.map(|v| v.max(0.0)));
        let emb = self.head.forward(&pooled)?;
        Ok((emb, BranchCache { input: share.clone(), pre1, act1, pre2, pooled }))
    }

    /// Embedding only; what a server computes per request.
    pub fn embed(&self, share: &FeatureMap) -> Result<Vec<f64>> {
        Ok(self.forward(share)?.0)
    }

    pub fn backward(&self, cache: &BranchCache, g_emb: &[f64], grad: &mut Branch, want_input: bool) -> Option<FeatureMap> {
        let g_pooled = self.head.backward(&cache.pooled, g_emb, &mut grad.head, true).unwrap();
        let (c2, h, w) = cache.pre2.shape();
        let mut g2 = global_avg_pool_backward(&g_pooled, c2, h, w);
        relu_backward_in_place(cache.pre2.data(), g2.data_mut());
        let mut g1 = self.conv2.backward(&cache.act1, &g2, &mut grad.conv2, true).unwrap();
        relu_backward_in_place(cache.pre1.data(), g1.data_mut());
        self.conv1.backward(&cache.input, &g1, &mut grad.conv1, want_input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub hidden: Dense,
    pub out: Dense,
}

impl Fusion {
    /// Class probabilities from the concatenated branch embeddings.
    pub fn forward(&self, concat: &[f64]) -> Result<Vec<f64>> {
        let pre = self.hidden.forward(concat)?;
        Ok(softmax(&self.out.forward(&relu_vec(&pre))?))
    }
}

/// Every trainable tensor of a bundle. Gradients and momentum buffers use the
/// same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub encoder: Conv2d,
    pub branches: Vec<Branch>,
    pub fusion: Fusion,
    /// Trainable DFS kernel and mix matrix, present only after hardening.
    pub dfs: Option<DfsLearnable>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: Conv2d::zeros(self.encoder.cin, self.encoder.cout, self.encoder.k).with_stride(self.encoder.stride),
            branches: self.branches.iter().map(Branch::zeros_like).collect(),
            fusion: Fusion {
                hidden: Dense::zeros(self.fusion.hidden.nin, self.fusion.hidden.nout),
                out: Dense::zeros(self.fusion.out.nin, self.fusion.out.nout),
            },
            dfs: self.dfs.as_ref().map(DfsLearnable::zeros_like),
        }
    }

    /// Parameter slices in a fixed order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        v.extend(self.encoder.params());
        for b in &self.branches {
            v.extend(b.conv1.params());
            v.extend(b.conv2.params());
            v.extend(b.head.params());
        }
        v.extend(self.fusion.hidden.params());
        v.extend(self.fusion.out.params());
        if let Some(d) = &self.dfs {
            v.push(&d.depthwise_kernel);
            v.push(&d.mix);
        }
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        v.extend(self.encoder.params_mut());
        for b in &mut self.branches {
            v.extend(b.conv1.params_mut());
            v.extend(b.conv2.params_mut());
            v.extend(b.head.params_mut());
        }
        v.extend(self.fusion.hidden.params_mut());
        v.extend(self.fusion.out.params_mut());
        if let Some(d) = &mut self.dfs {
            v.push(&mut d.depthwise_kernel);
            v.push(&mut d.mix);
        }
        v
    }

    pub fn count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales to at most `max` in L2 norm. `max <= 0` leaves it unchanged.
    pub fn clip_norm(&mut self, max: f64) {
        let n = self.norm();
        if max > 0.0 && n > max {
            self.scale(max / n);
        }
    }

    pub fn scale(&mut self, f: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= f);
        }
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Weights plus the configuration needed to rebuild the policy family.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub dfs: DfsConfig,
    pub keys: Vec<u64>,
    params: Params,
    version: u64,
    pub at_log: Option<AtLog>,
}

impl PartialEq for ModelBundle {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.dfs == other.dfs
            && self.keys == other.keys
            && self.params == other.params
            && self.at_log == other.at_log
    }
}

impl ModelBundle {
    /// Seeded He-initialised bundle.
    pub fn new(arch: ArchConfig, dfs: DfsConfig, keys: Vec<u64>, init_seed: u64) -> Result<Self> {
        arch.validate(&dfs)?;
        if keys.is_empty() {
            return Err(Error::Config("a bundle needs at least one key".into()));
        }
        let mut rng = SplitMix64::new(derive_seed(init_seed, tag::INIT, 0));
        let encoder = Conv2d::init(arch.in_channels, arch.encoder_channels, arch.encoder_kernel, &mut rng).with_stride(arch.encoder_stride);
        let cb = arch.encoder_channels / dfs.num_branches;
        let branches = (0..dfs.num_branches).map(|_| Branch::init(&arch, cb, &mut rng)).collect();
        let fusion = Fusion {
            hidden: Dense::init(dfs.num_branches * arch.embed_dim, arch.fusion_hidden, &mut rng),
            out: Dense::init(arch.fusion_hidden, arch.classes, &mut rng),
        };
        let params = Params { encoder, branches, fusion, dfs: None };
        Ok(Self { arch, dfs, keys, params, version: fresh_version(), at_log: None })
    }

    pub(crate) fn from_parts(arch: ArchConfig, dfs: DfsConfig, keys: Vec<u64>, params: Params, at_log: Option<AtLog>) -> Result<Self> {
        arch.validate(&dfs)?;
        let b = Self { arch, dfs, keys, params, version: fresh_version(), at_log };
        b.check_params()?;
        Ok(b)
    }

    fn check_params(&self) -> Result<()> {
        let a = &self.arch;
        let n = self.dfs.num_branches;
        let p = &self.params;
        let cb = a.encoder_channels / n;
        let [c1, c2] = a.branch_channels;
        let conv_ok = |c: &Conv2d, cin, cout, k| c.cin == cin && c.cout == cout && c.k == k && c.weight.len() == cout * cin * k * k && c.bias.len() == cout;
        let dense_ok = |d: &Dense, nin, nout| d.nin == nin && d.nout == nout && d.weight.len() == nin * nout && d.bias.len() == nout;
        let ok = conv_ok(&p.encoder, a.in_channels, a.encoder_channels, a.encoder_kernel)
            && p.encoder.stride == a.encoder_stride
            && p.branches.len() == n
            && p.branches.iter().all(|b| {
                conv_ok(&b.conv1, cb, c1, a.branch_kernel)
                    && conv_ok(&b.conv2, c1, c2, a.branch_kernel)
                    && dense_ok(&b.head, c2, a.embed_dim)
            })
            && dense_ok(&p.fusion.hidden, n * a.embed_dim, a.fusion_hidden)
            && dense_ok(&p.fusion.out, a.fusion_hidden, a.classes)
            && p.dfs.as_ref().is_none_or(|d| {
                d.depthwise_kernel.len() == a.encoder_channels * self.dfs.kernel_size * self.dfs.kernel_size
                    && d.mix.len() == n * n
            });
        if !ok {
            return Err(shape_err("parameter shapes do not match the architecture"));
        }
        Ok(())
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Mutable parameter access. Any cache taken before this call becomes stale.
    pub fn params_mut(&mut self) -> &mut Params {
        self.version = fresh_version();
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_branches(&self) -> usize {
        self.dfs.num_branches
    }

    pub fn family(&self) -> Result<PolicyFamily> {
        family_create(&self.keys, &self.dfs, self.arch.encoder_shape())
    }

    /// Turns on trainable DFS parameters, initialised from `policy`.
    pub fn enable_dfs_learning(&mut self, policy: &DfsPolicy) {
        if self.params.dfs.is_none() {
            self.params_mut().dfs = Some(DfsLearnable::from_policy(policy));
        }
    }

    pub fn branch(&self, i: usize) -> &Branch {
        &self.params.branches[i]
    }

    pub fn encode(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.params.encoder.forward(x)
    }

    /// Client side up to transmission: encoder then DFS.
    pub fn client_shares(&self, x: &FeatureMap, policy: &DfsPolicy, nonce: u64) -> Result<Vec<Share>> {
        let z = self.encode(x)?;
        Ok(dfs_forward(&z, policy, &self.dfs, self.params.dfs.as_ref(), nonce)?.0)
    }

    /// Client side after the servers reply.
    pub fn fuse(&self, embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
        if embeddings.len() != self.num_branches() || embeddings.iter().any(|e| e.len() != self.arch.embed_dim) {
            return Err(shape_err("fusion expects one embedding of width d per branch"));
        }
        self.params.fusion.forward(&embeddings.concat())
    }

    /// Class probabilities with everything in process.
    pub fn predict(&self, x: &FeatureMap, policy: &DfsPolicy, nonce: u64) -> Result<Vec<f64>> {
        let shares = self.client_shares(x, policy, nonce)?;
        let embs = shares
            .iter()
            .map(|s| self.params.branches[s.branch_id].embed(&s.features))
            .collect::<Result<Vec<_>>>()?;
        self.fuse(&embs)
    }
}

/// Activations retained by [`forward_full`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    x: FeatureMap,
    policy: DfsPolicy,
    dfs_trace: DfsTrace,
    pub shares: Vec<FeatureMap>,
    branches: Vec<BranchCache>,
    concat: Vec<f64>,
    fus_pre: Vec<f64>,
    fus_act: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Full forward pass; returns class probabilities and the backprop cache.
pub fn forward_full(x: &FeatureMap, bundle: &ModelBundle, policy: &DfsPolicy, nonce: u64) -> Result<(Vec<f64>, ForwardCache)> {
    let p = &bundle.params;
    let z = p.encoder.forward(x)?;
    let (shares, dfs_trace) = dfs_forward(&z, policy, &bundle.dfs, p.dfs.as_ref(), nonce)?;
    let mut concat = Vec::with_capacity(bundle.num_branches() * bundle.arch.embed_dim);
    let mut caches = Vec::with_capacity(shares.len());
    for s in &shares {
        let (e, c) = p.branches[s.branch_id].forward(&s.features)?;
        concat.extend(e);
        caches.push(c);
    }
    let fus_pre = p.fusion.hidden.forward(&concat)?;
    let fus_act = relu_vec(&fus_pre);
    let probs = softmax(&p.fusion.out.forward(&fus_act)?);
    let cache = ForwardCache {
        version: bundle.version,
        x: x.clone(),
        policy: policy.clone(),
        dfs_trace,
        shares: shares.into_iter().map(|s| s.features).collect(),
        branches: caches,
        concat,
        fus_pre,
        fus_act,
        probs: probs.clone(),
    };
    Ok((probs, cache))
}

/// Cross-entropy gradients for one sample, accumulated into `grads`.
/// Returns the loss.
pub fn backward_full(bundle: &ModelBundle, cache: &ForwardCache, label: usize, grads: &mut Params) -> Result<f64> {
    backward_with_share_grads(bundle, cache, label, 1.0, None, grads)
}

/// Like [`backward_full`] with the task gradient scaled by `task_weight` and
/// extra gradients `share_grads` injected at the shares (used by the
/// adversarial objective).
pub fn backward_with_share_grads(
    bundle: &ModelBundle,
    cache: &ForwardCache,
    label: usize,
    task_weight: f64,
    share_grads: Option<&[FeatureMap]>,
    grads: &mut Params,
) -> Result<f64> {
    if cache.version != bundle.version {
        return Err(Error::StaleCache);
    }
    if label >= bundle.arch.classes {
        return Err(Error::InvalidArgument(format!("label {label} >= {}", bundle.arch.classes)));
    }
    let p = &bundle.params;
    let (loss, mut g_logits) = softmax_ce(&cache.probs, label);
    g_logits.iter_mut().for_each(|g| *g *= task_weight);
    let mut g_act = p.fusion.out.backward(&cache.fus_act, &g_logits, &mut grads.fusion.out, true).unwrap();
    relu_backward_in_place(&cache.fus_pre, &mut g_act);
    let g_concat = p.fusion.hidden.backward(&cache.concat, &g_act, &mut grads.fusion.hidden, true).unwrap();
    let d = bundle.arch.embed_dim;
    let mut g_shares = Vec::with_capacity(cache.branches.len());
    for (i, bc) in cache.branches.iter().enumerate() {
        let mut gs = p.branches[i]
            .backward(bc, &g_concat[i * d..(i + 1) * d], &mut grads.branches[i], true)
            .unwrap();
        if let Some(extra) = share_grads {
            extra[i].ensure_shape(&gs, "share gradient")?;
            for (a, b) in gs.data_mut().iter_mut().zip(extra[i].data()) {
                *a += b;
            }
        }
        g_shares.push(gs);
    }
    let g_z = dfs_backward(&cache.dfs_trace, &cache.policy, &bundle.dfs, p.dfs.as_ref(), &g_shares, grads.dfs.as_mut())?;
    p.encoder.backward(&cache.x, &g_z, &mut grads.encoder, false);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfs::make_policy;

    fn tiny(sigma: f64) -> (ModelBundle, DfsPolicy) {
        tiny_strided(sigma, 1)
    }

    /// 4x4 input at stride 1; 7x8 at stride 2 so the encoder output stays 4x4.
    fn tiny_strided(sigma: f64, stride: usize) -> (ModelBundle, DfsPolicy) {
        let (height, width) = if stride == 1 { (4, 4) } else { (7, 8) };
        let arch = ArchConfig {
            height,
            width,
            encoder_stride: stride,
            classes: 3,
            branch_channels: [2, 3],
            embed_dim: 2,
            fusion_hidden: 5,
            ..ArchConfig::default()
        };
        let dfs = DfsConfig { patch_size: 2, noise_scale: sigma, ..DfsConfig::default() };
        let bundle = ModelBundle::new(arch, dfs.clone(), vec![7], 3).unwrap();
        let policy = make_policy(7, &dfs, (6, 4, 4)).unwrap();
        (bundle, policy)
    }

    fn input(seed: u64) -> FeatureMap {
        input_sized(seed, 4, 4)
    }

    fn input_sized(seed: u64, h: usize, w: usize) -> FeatureMap {
        let mut rng = SplitMix64::new(seed);
        FeatureMap::from_vec(1, h, w, (0..h * w).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let (b, p) = tiny(0.3);
        let (probs, _) = forward_full(&input(1), &b, &p, 5).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(probs, b.predict(&input(1), &p, 5).unwrap());
    }

    #[test]
    fn noise_free_forward_is_deterministic() {
        let (b, p) = tiny(0.0);
        let a = forward_full(&input(2), &b, &p, 1).unwrap().0;
        let c = forward_full(&input(2), &b, &p, 2).unwrap().0;
        assert_eq!(a, c);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (mut b, p) = tiny(0.3);
        let (_, cache) = forward_full(&input(3), &b, &p, 1).unwrap();
        b.params_mut().encoder.bias[0] += 0.0;
        let mut g = b.params().zeros_like();
        assert!(matches!(backward_full(&b, &cache, 0, &mut g), Err(Error::StaleCache)));
    }

    /// Every parameter against a central difference of the cross-entropy.
    /// The check runs with σ = 0: the adjoint treats the noise term as a
    /// constant, which is exact only when no noise is drawn.
    #[test]
    fn full_gradient_check() {
        gradient_check(1);
    }

    #[test]
    fn full_gradient_check_strided_encoder() {
        gradient_check(2);
    }

    fn gradient_check(stride: usize) {
        let (mut bundle, policy) = tiny_strided(0.0, stride);
        bundle.enable_dfs_learning(&policy);
        // Keep the LocConf ReLU active so every layer sees a signal, and move
        // zero biases off the ReLU kink that dead inputs would otherwise sit on.
        let mut rng = SplitMix64::new(11);
        let p = bundle.params_mut();
        p.encoder.bias.iter_mut().for_each(|b| *b = 1.0);
        for b in &mut p.branches {
            for v in b.conv1.bias.iter_mut().chain(&mut b.conv2.bias).chain(&mut b.head.bias) {
                *v = 0.1 * rng.gaussian();
            }
        }
        for v in p.fusion.hidden.bias.iter_mut().chain(&mut p.fusion.out.bias) {
            *v = 0.1 * rng.gaussian();
        }
        let x = input_sized(4, bundle.arch.height, bundle.arch.width);
        let label = 1;
        let loss = |b: &ModelBundle| -> f64 {
            let (probs, _) = forward_full(&x, b, &policy, 0).unwrap();
            -probs[label].ln()
        };
        let (_, cache) = forward_full(&x, &bundle, &policy, 0).unwrap();
        let mut grads = bundle.params().zeros_like();
        backward_full(&bundle, &cache, label, &mut grads).unwrap();
        let analytic: Vec<f64> = grads.slices().concat();
        let eps = 1e-3;
        let mut checked = 0;
        let mut bad = Vec::new();
        for idx in 0..analytic.len() {
            let perturb = |delta: f64| {
                let mut b = bundle.clone();
                let mut k = idx;
                for s in b.params_mut().slices_mut() {
                    if k < s.len() {
                        s[k] += delta;
                        break;
                    }
                    k -= s.len();
                }
                loss(&b)
            };
            let num = (perturb(eps) - perturb(-eps)) / (2.0 * eps);
            let a = analytic[idx];
            let scale = a.abs().max(num.abs());
            if scale < 1e-7 {
                continue;
            }
            checked += 1;
            if (a - num).abs() / scale >= 1e-3 {
                bad.push((idx, a, num));
            }
        }
        assert!(checked > analytic.len() / 2, "only {checked} of {} parameters had signal", analytic.len());
        assert!(bad.is_empty(), "{bad:?}");
    }
}
