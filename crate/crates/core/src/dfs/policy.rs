//! Key-derived DFS policies and their binary serialization.

use super::DfsConfig;
use crate::error::{shape_err, Error, Result};
use crate::linalg::Mat;
use crate::rng::{derive_seed, tag, SplitMix64};

/// Std of the seeded jitter added to the averaging depthwise kernel.
pub const KERNEL_JITTER_STD: f64 = 0.05;

const POLICY_MAGIC: &[u8; 4] = b"PDFP";
const POLICY_VERSION: u8 = 1;

/// Every stage parameter for one key, fully materialised.
#[derive(Debug, Clone, PartialEq)]
pub struct DfsPolicy {
    pub policy_id: u32,
    pub key: u64,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_branches: usize,
    pub kernel_size: usize,
    pub patch_size: usize,
    /// `channels x k x k`, row-major.
    pub depthwise_kernel: Vec<f64>,
    /// `channels x channels`, row-major, orthogonal.
    pub ortho: Vec<f64>,
    /// One permutation of `0..channels/N` per branch.
    pub chan_perms: Vec<Vec<u32>>,
    /// Per branch, per branch-channel `(row, col)` offset in patch-grid units.
    pub patch_shifts: Vec<Vec<(u32, u32)>>,
    /// `N x N`, row-major.
    pub mix: Vec<f64>,
    pub noise_seeds: Vec<u64>,
    /// Whole-tensor channel shuffle used only by the naive-channel-split baseline.
    pub naive_perm: Vec<u32>,
}

impl DfsPolicy {
    pub fn branch_channels(&self) -> usize {
        self.channels / self.num_branches
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn ortho_mat(&self) -> Mat {
        Mat::from_vec(self.channels, self.channels, self.ortho.clone()).expect("ortho shape")
    }

    pub fn mix_mat(&self) -> Mat {
        Mat::from_vec(self.num_branches, self.num_branches, self.mix.clone()).expect("mix shape")
    }

    /// A policy whose every stage is the identity (kernel = centre tap,
    /// `Q = I`, identity permutations, zero shifts, `M = I`).
    pub fn identity(channels: usize, height: usize, width: usize, cfg: &DfsConfig) -> Result<Self> {
        cfg.validate(channels, height, width)?;
        let (n, k) = (cfg.num_branches, cfg.kernel_size);
        let cb = channels / n;
        let mut kernel = vec![0.0; channels * k * k];
        for c in 0..channels {
            kernel[c * k * k + (k / 2) * k + k / 2] = 1.0;
        }
        Ok(Self {
            policy_id: 0,
            key: 0,
            channels,
            height,
            width,
            num_branches: n,
            kernel_size: k,
            patch_size: cfg.patch_size,
            depthwise_kernel: kernel,
            ortho: Mat::identity(channels).data().to_vec(),
            chan_perms: vec![(0..cb as u32).collect(); n],
            patch_shifts: vec![vec![(0, 0); cb]; n],
            mix: Mat::identity(n).data().to_vec(),
            noise_seeds: vec![0; n],
            naive_perm: (0..channels as u32).collect(),
        })
    }

    /// Checks the structural invariants: orthogonality of `Q`, bijective
    /// permutations, in-grid shifts, unit row sums of `M`.
    pub fn validate(&self) -> Result<()> {
        let (c, n, k) = (self.channels, self.num_branches, self.kernel_size);
        if n == 0 || c % n != 0 {
            return Err(Error::Config(format!("{c} channels not divisible by {n} branches")));
        }
        let cb = c / n;
        let (gh, gw) = self.grid();
        let ok = self.depthwise_kernel.len() == c * k * k
            && self.ortho.len() == c * c
            && self.chan_perms.len() == n
            && self.patch_shifts.len() == n
            && self.mix.len() == n * n
            && self.noise_seeds.len() == n
            && self.naive_perm.len() == c;
        if !ok {
            return Err(shape_err("policy field lengths inconsistent"));
        }
        let q = self.ortho_mat();
        let err = q.matmul(&q.transpose())?.max_abs_diff(&Mat::identity(c));
        if err >= 1e-5 {
            return Err(Error::Config(format!("ortho matrix not orthogonal (err {err:e})")));
        }
        for perm in self.chan_perms.iter() {
            check_bijection(perm, cb)?;
        }
        check_bijection(&self.naive_perm, c)?;
        for shifts in &self.patch_shifts {
            if shifts.len() != cb || shifts.iter().any(|&(a, b)| a as usize >= gh || b as usize >= gw) {
                return Err(Error::Config("patch shift outside the patch grid".into()));
            }
        }
        for i in 0..n {
            let s: f64 = self.mix[i * n..(i + 1) * n].iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("mix row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Versioned little-endian blob. Layout:
    ///
    /// ```text
    /// "PDFP" | version u8 | policy_id u32 | key u64
    /// channels u32 | height u32 | width u32 | branches u32 | kernel u32 | patch u32
    /// depthwise_kernel  f32 x C*k*k
    /// ortho             f32 x C*C
    /// chan_perms        u32 x N*(C/N)
    /// patch_shifts      (u32 row, u32 col) x N*(C/N)
    /// mix               f32 x N*N
    /// noise_seeds       u64 x N
    /// naive_perm        u32 x C
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(POLICY_MAGIC);
        out.push(POLICY_VERSION);
        out.extend_from_slice(&self.policy_id.to_le_bytes());
        out.extend_from_slice(&self.key.to_le_bytes());
        for d in [self.channels, self.height, self.width, self.num_branches, self.kernel_size, self.patch_size] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let put_f32 = |out: &mut Vec<u8>, vs: &[f64]| {
            vs.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes()))
        };
        put_f32(&mut out, &self.depthwise_kernel);
        put_f32(&mut out, &self.ortho);
        for v in self.chan_perms.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (a, b) in self.patch_shifts.iter().flatten() {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
        }
        put_f32(&mut out, &self.mix);
        for s in &self.noise_seeds {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for v in &self.naive_perm {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != POLICY_MAGIC {
            return Err(r.err("bad policy magic"));
        }
        let version = r.take(1)?[0];
        if version != POLICY_VERSION {
            return Err(r.err(&format!("unsupported policy version {version}")));
        }
        let policy_id = r.u32()?;
        let key = r.u64()?;
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let [channels, height, width, n, k, patch] = dims;
        if n == 0 || channels % n != 0 || patch == 0 {
            return Err(r.err("inconsistent policy dimensions"));
        }
        let cb = channels / n;
        let depthwise_kernel = r.f32s(channels * k * k)?;
        let ortho = r.f32s(channels * channels)?;
        let mut chan_perms = Vec::with_capacity(n);
        for _ in 0..n {
            chan_perms.push((0..cb).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
        }
        let mut patch_shifts = Vec::with_capacity(n);
        for _ in 0..n {
            patch_shifts.push((0..cb).map(|_| Ok((r.u32()?, r.u32()?))).collect::<Result<Vec<_>>>()?);
        }
        let mix = r.f32s(n * n)?;
        let noise_seeds = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let naive_perm = (0..channels).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after policy"));
        }
        Ok(Self {
            policy_id,
            key,
            channels,
            height,
            width,
            num_branches: n,
            kernel_size: k,
            patch_size: patch,
            depthwise_kernel,
            ortho,
            chan_perms,
            patch_shifts,
            mix,
            noise_seeds,
            naive_perm,
        })
    }
}

fn check_bijection(perm: &[u32], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Config(format!("permutation of length {} over {n}", perm.len())));
    }
    for &p in perm {
        let p = p as usize;
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::Config("permutation is not a bijection".into()));
        }
    }
    Ok(())
}

/// Materialise the policy for `key` over an encoder output of shape
/// `(channels, height, width)`.
pub fn make_policy(key: u64, cfg: &DfsConfig, shape: (usize, usize, usize)) -> Result<DfsPolicy> {
    let (channels, height, width) = shape;
    cfg.validate(channels, height, width)?;
    let (n, k, p) = (cfg.num_branches, cfg.kernel_size, cfg.patch_size);
    let cb = channels / n;
    let (gh, gw) = (height / p, width / p);

    let mut rng = SplitMix64::new(derive_seed(key, tag::LOC_CONF, 0));
    let avg = 1.0 / (k * k) as f64;
    let depthwise_kernel =
        (0..channels * k * k).map(|_| to_f32_precision(avg + KERNEL_JITTER_STD * rng.gaussian())).collect();

    let ortho = ortho_matrix(derive_seed(key, tag::ORTHO, 0), channels)
        .data()
        .iter()
        .map(|&v| to_f32_precision(v))
        .collect();

    let chan_perms = (0..n)
        .map(|b| fisher_yates(derive_seed(key, tag::CHAN_PERM, b as u32), cb).into_iter().map(|v| v as u32).collect())
        .collect();

    let patch_shifts = (0..n)
        .map(|b| {
            let mut rng = SplitMix64::new(derive_seed(key, tag::PATCH_SHIFT, b as u32));
            (0..cb).map(|_| (rng.below(gh) as u32, rng.below(gw) as u32)).collect()
        })
        .collect();

    let noise_seeds = (0..n).map(|b| derive_seed(key, tag::NOISE, b as u32)).collect();
    let naive_perm =
        fisher_yates(derive_seed(key, tag::NAIVE_SPLIT, 0), channels).into_iter().map(|v| v as u32).collect();

    let policy = DfsPolicy {
        policy_id: 0,
        key,
        channels,
        height,
        width,
        num_branches: n,
        kernel_size: k,
        patch_size: p,
        depthwise_kernel,
        ortho,
        chan_perms,
        patch_shifts,
        mix: mix_matrix(n, cfg.mix_alpha).into_iter().map(to_f32_precision).collect(),
        noise_seeds,
        naive_perm,
    };
    Ok(policy)
}

// Real-valued policy fields are stored as f32, so keep the in-memory copy at
// that precision and serialization stays lossless.
fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

/// `(1 - α) I + α/(N-1) (J - I)`, row-major. For `N = 1` this is `[1]`.
pub fn mix_matrix(n: usize, alpha: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let off = alpha / (n - 1) as f64;
    (0..n * n).map(|i| if i / n == i % n { 1.0 - alpha } else { off }).collect()
}

/// Seeded Gaussian matrix orthogonalised by Householder QR, with column
/// signs fixed so that `R` has a positive diagonal.
pub fn ortho_matrix(seed: u64, channels: usize) -> Mat {
    let mut rng = SplitMix64::new(seed);
    let g = Mat::from_fn(channels, channels, |_, _| rng.gaussian());
    g.householder_qr().expect("square").0
}

/// In-place Fisher-Yates from the identity: for `i = n-1..1`, swap with
/// `j = next_u64 mod (i + 1)`.
pub fn fisher_yates(seed: u64, n: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = SplitMix64::new(seed);
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        perm.swap(i, j);
    }
    perm
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn err(&self, reason: &str) -> Error {
        Error::Format { offset: self.pos as u64, reason: reason.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated policy blob"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)).collect()
    }
}
