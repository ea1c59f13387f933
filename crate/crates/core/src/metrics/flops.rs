//! FLOP accounting.
//!
//! Conventions (one multiply-accumulate = 2 FLOPs):
//!
//! | op | FLOPs |
//! |---|---|
//! | conv `k x k`, `Cin -> Cout`, `H x W` output | `2 Cin Cout k² H W` |
//! | depthwise conv | `2 C k² H W` |
//! | 1x1 orthogonal mix | `2 C² H W` |
//! | AdaNoise | `4` per element |
//! | CrossMix over `N` shares of `c x H x W` | `2 N² c H W` |
//! | dense `n -> m` | `2 n m` |
//! | ReLU, pooling, permutations, patch moves, softmax | `0` |
//!
//! [`flops_count`] evaluates these in closed form. The kernels also report to
//! a thread-local counter that is live only inside [`measure`], which gives
//! an independent element-level tally of what actually ran.

use std::cell::Cell;

use serde::Serialize;

use crate::dfs::{Ablation, DfsConfig, Stage};
use crate::model::ArchConfig;

thread_local! {
    static COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Adds `n` to the active counter, if any.
#[inline]
pub fn count(n: u64) {
    COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}

/// Runs `f` and returns its result with the FLOPs it reported. Nested calls
/// also add their total to the enclosing measurement.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = COUNTER.with(|c| c.replace(Some(0)));
    let r = f();
    let inner = COUNTER.with(|c| c.get()).unwrap_or(0);
    COUNTER.with(|c| c.set(outer.map(|o| o + inner)));
    (r, inner)
}

pub fn conv(cin: usize, cout: usize, k: usize, h: usize, w: usize) -> u64 {
    2 * (cin * cout * k * k * h * w) as u64
}

pub fn dense(nin: usize, nout: usize) -> u64 {
    2 * (nin * nout) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct DfsFlops {
    pub loc_conf: u64,
    pub ortho_rcb: u64,
    pub ada_noise: u64,
    pub cross_mix: u64,
}

impl DfsFlops {
    pub fn total(&self) -> u64 {
        self.loc_conf + self.ortho_rcb + self.ada_noise + self.cross_mix
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub encoder: u64,
    pub dfs: DfsFlops,
    /// Encoder plus DFS: what the client spends before anything is sent.
    pub client: u64,
    /// One server branch.
    pub server_branch: u64,
    /// Client-side fusion head, reported apart from `client`.
    pub fusion: u64,
    /// Client cost of a deep split with the same total backbone capacity:
    /// the encoder plus a single branch-style trunk `N` times as wide, cut at
    /// its last shared layer.
    pub deep_split_client: u64,
}

impl FlopReport {
    pub fn client_ratio(&self) -> f64 {
        self.client as f64 / self.deep_split_client as f64
    }
}

/// Per-stage DFS cost for an encoder output of `c x h x w`.
pub fn dfs_flops(cfg: &DfsConfig, c: usize, h: usize, w: usize) -> DfsFlops {
    let ab = cfg.ablation;
    if ab == Ablation::NaiveChannelSplit {
        return DfsFlops::default();
    }
    let n = cfg.num_branches;
    let k = cfg.kernel_size;
    let on = |s: Stage, v: u64| if ab.skips(s) { 0 } else { v };
    DfsFlops {
        loc_conf: on(Stage::LocConf, 2 * (c * k * k * h * w) as u64),
        ortho_rcb: on(Stage::OrthoRcb, 2 * (c * c * h * w) as u64),
        ada_noise: on(Stage::AdaNoise, if cfg.noise_scale > 0.0 { 4 * (c * h * w) as u64 } else { 0 }),
        cross_mix: on(Stage::CrossMix, 2 * (n * n * (c / n) * h * w) as u64),
    }
}

/// Closed-form FLOP counts for the architecture and DFS configuration.
pub fn flops_count(arch: &ArchConfig, cfg: &DfsConfig) -> FlopReport {
    let (c, h, w) = arch.encoder_shape();
    let n = cfg.num_branches;
    let encoder = conv(arch.in_channels, c, arch.encoder_kernel, h, w);
    let dfs = dfs_flops(cfg, c, h, w);
    let [c1, c2] = arch.branch_channels;
    let kb = arch.branch_kernel;
    let server_branch =
        conv(c / n, c1, kb, h, w) + conv(c1, c2, kb, h, w) + dense(c2, arch.embed_dim);
    let fusion = dense(n * arch.embed_dim, arch.fusion_hidden) + dense(arch.fusion_hidden, arch.classes);
    let deep_split_client = encoder + conv(c, n * c1, kb, h, w) + conv(n * c1, n * c2, kb, h, w);
    FlopReport { encoder, client: encoder + dfs.total(), dfs, server_branch, fusion, deep_split_client }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_closed_form() {
        assert_eq!(conv(3, 12, 3, 16, 16), 165_888);
    }

    #[test]
    fn counter_only_counts_inside_measure() {
        count(10);
        let ((), n) = measure(|| {
            count(3);
            count(4);
        });
        assert_eq!(n, 7);
        let ((), outer) = measure(|| {
            count(1);
            let ((), inner) = measure(|| count(5));
            assert_eq!(inner, 5);
        });
        assert_eq!(outer, 6);
    }

    #[test]
    fn ablation_zeroes_stage() {
        let cfg = DfsConfig::default();
        let full = dfs_flops(&cfg, 6, 16, 16);
        let no_mix = dfs_flops(&DfsConfig { ablation: Ablation::Without(Stage::CrossMix), ..cfg.clone() }, 6, 16, 16);
        assert_eq!(no_mix.cross_mix, 0);
        assert_eq!(no_mix.loc_conf, full.loc_conf);
        let ncs = dfs_flops(&DfsConfig { ablation: Ablation::NaiveChannelSplit, ..cfg }, 6, 16, 16);
        assert_eq!(ncs.total(), 0);
    }
}
