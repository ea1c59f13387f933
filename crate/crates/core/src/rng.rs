//! Deterministic randomness.
//!
//! Every seeded component (policies, noise, initialisation, data) draws from
//! [`SplitMix64`], so a run reproduces bit-for-bit on any platform. Library
//! PRNGs are never used for policy material.

/// Golden-ratio increment of SplitMix64.
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

const DOMAIN_SALT: u64 = 0xD6E8_FEB8_6659_FD93;

/// SplitMix64 generator. Identical state gives an identical stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller. The sine partner is discarded so that
    /// every call consumes exactly two words.
    #[inline]
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::EPSILON / 2.0);
        let u2 = self.uniform();
        gaussian_from_uniforms(u1, u2)
    }

    /// `next_u64() mod n`. Modulo bias is ignored; `n` is always tiny here.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }
}

/// Box-Muller cosine branch with `u1` clamped away from zero.
#[inline]
pub fn gaussian_from_uniforms(u1: f64, u2: f64) -> f64 {
    let u1 = u1.max(f64::EPSILON / 2.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Domain-separated seed for one `(stage, branch)` stream under `key`.
pub fn derive_seed(key: u64, domain_tag: u32, branch: u32) -> u64 {
    let mixed = key ^ (((domain_tag as u64) << 32) | branch as u64) ^ DOMAIN_SALT;
    let mut rng = SplitMix64::new(mixed);
    rng.next_u64();
    rng.next_u64()
}

/// Domain tags used when deriving per-stage seeds.
pub mod tag {
    pub const LOC_CONF: u32 = 1;
    pub const ORTHO: u32 = 2;
    pub const NOISE: u32 = 3;
    pub const CHAN_PERM: u32 = 4;
    pub const PATCH_SHIFT: u32 = 5;
    pub const NAIVE_SPLIT: u32 = 6;
    pub const INIT: u32 = 16;
    pub const TRAIN: u32 = 17;
    pub const DATA: u32 = 18;
    pub const PROBE: u32 = 19;
    pub const ATTACK: u32 = 20;
    pub const NONCE: u32 = 21;
}
