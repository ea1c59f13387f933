//! The six DFS stages as standalone tensor operations, with the adjoints
//! needed for backpropagation.

use crate::conv::{shift_accumulate, shifted_dot, tap_offset};
use crate::error::{shape_err, Error, Result};
use crate::metrics::flops;
use crate::rng::SplitMix64;
use crate::tensor::{mean_std, FeatureMap};

/// Per-channel `k x k` depthwise convolution with zero "same" padding.
pub fn depthwise_conv(z: &FeatureMap, kernel: &[f64], k: usize) -> Result<FeatureMap> {
    let (c, h, w) = z.shape();
    if k.is_multiple_of(2) || kernel.len() != c * k * k {
        return Err(shape_err(format!("depthwise kernel of {} values for {c} channels, k={k}", kernel.len())));
    }
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        let taps = &kernel[ch * k * k..(ch + 1) * k * k];
        let src = z.channel(ch);
        let dst = out.channel_mut(ch);
        for (t, &wt) in taps.iter().enumerate() {
            shift_accumulate(dst, src, h, w, tap_offset(t / k, k), tap_offset(t % k, k), wt);
        }
        flops::count(2 * (k * k * h * w) as u64);
    }
    Ok(out)
}

/// Adjoint of [`depthwise_conv`]: accumulates into `grad_in` and `grad_kernel`.
pub fn depthwise_conv_backward(
    z: &FeatureMap,
    kernel: &[f64],
    k: usize,
    grad_out: &FeatureMap,
    grad_in: Option<&mut FeatureMap>,
    grad_kernel: Option<&mut [f64]>,
) {
    let (c, h, w) = z.shape();
    if let Some(gk) = grad_kernel {
        for ch in 0..c {
            for t in 0..k * k {
                gk[ch * k * k + t] +=
                    shifted_dot(grad_out.channel(ch), z.channel(ch), h, w, tap_offset(t / k, k), tap_offset(t % k, k));
            }
        }
    }
    if let Some(gi) = grad_in {
        for ch in 0..c {
            let taps = &kernel[ch * k * k..(ch + 1) * k * k];
            for (t, &wt) in taps.iter().enumerate() {
                let (dy, dx) = (tap_offset(t / k, k), tap_offset(t % k, k));
                shift_accumulate(gi.channel_mut(ch), grad_out.channel(ch), h, w, -dy, -dx, wt);
            }
        }
    }
}

pub fn relu(z: &FeatureMap) -> FeatureMap {
    z.map(|v| v.max(0.0))
}

/// LocConf: depthwise convolution followed by ReLU.
pub fn loc_conf(z: &FeatureMap, kernel: &[f64], k: usize) -> Result<FeatureMap> {
    Ok(relu(&depthwise_conv(z, kernel, k)?))
}

/// 1x1 channel mixing: at each position `v <- Q v`, with `Q` row-major `C x C`.
pub fn channel_mix(z: &FeatureMap, q: &[f64]) -> Result<FeatureMap> {
    let (c, h, w) = z.shape();
    if q.len() != c * c {
        return Err(shape_err(format!("{}-entry matrix for {c} channels", q.len())));
    }
    let mut out = FeatureMap::zeros(c, h, w);
    for i in 0..c {
        let dst = out.channel_mut(i);
        for j in 0..c {
            let a = q[i * c + j];
            if a != 0.0 {
                for (d, s) in dst.iter_mut().zip(z.channel(j)) {
                    *d += a * s;
                }
            }
        }
    }
    flops::count(2 * (c * c * h * w) as u64);
    Ok(out)
}

/// `v <- Qᵀ v` at each position.
pub fn channel_mix_transpose(z: &FeatureMap, q: &[f64]) -> Result<FeatureMap> {
    let c = z.channels();
    if q.len() != c * c {
        return Err(shape_err("channel_mix_transpose dimension"));
    }
    let qt: Vec<f64> = (0..c * c).map(|idx| q[(idx % c) * c + idx / c]).collect();
    channel_mix(z, &qt)
}

/// OrthoRcb: orthogonal 1x1 recombination of channels.
pub fn ortho_rcb(z: &FeatureMap, q: &[f64]) -> Result<FeatureMap> {
    channel_mix(z, q)
}

/// Contiguous channel blocks of size `C/N`; block `i` goes to branch `i`.
pub fn split_branches(z: &FeatureMap, n: usize) -> Result<Vec<FeatureMap>> {
    let c = z.channels();
    if n == 0 || !c.is_multiple_of(n) {
        return Err(Error::Config(format!("{c} channels cannot be split into {n} branches")));
    }
    let cb = c / n;
    (0..n).map(|i| z.slice_channels(i * cb, (i + 1) * cb)).collect()
}

/// AdaNoise: `out_c = s_c + σ · std(s_c) · ε`, ε drawn per element from the
/// seeded stream, std the population std of the channel.
pub fn ada_noise(s: &FeatureMap, seed: u64, sigma: f64) -> Result<FeatureMap> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise scale {sigma}")));
    }
    let mut out = s.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = SplitMix64::new(seed);
    for c in 0..s.channels() {
        let ch = s.channel(c);
        // Rounding in the mean gives constant channels a tiny spurious std.
        let constant = ch.iter().all(|&v| v == ch[0]);
        let scale = if constant { 0.0 } else { sigma * mean_std(ch).1 };
        for v in out.channel_mut(c) {
            let eps = rng.gaussian();
            *v += scale * eps;
        }
    }
    flops::count(4 * s.len() as u64);
    Ok(out)
}

/// ChanPerm: output channel `i` is input channel `perm[i]`.
pub fn chan_perm(s: &FeatureMap, perm: &[u32]) -> Result<FeatureMap> {
    let c = s.channels();
    check_perm(perm, c)?;
    let mut out = FeatureMap::zeros(c, s.height(), s.width());
    for (i, &p) in perm.iter().enumerate() {
        out.channel_mut(i).copy_from_slice(s.channel(p as usize));
    }
    Ok(out)
}

pub fn inverse_perm(perm: &[u32]) -> Vec<u32> {
    let mut inv = vec![0u32; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p as usize] = i as u32;
    }
    inv
}

fn check_perm(perm: &[u32], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(shape_err(format!("permutation of {} entries for {n} channels", perm.len())));
    }
    for &p in perm {
        if p as usize >= n || std::mem::replace(&mut seen[p as usize], true) {
            return Err(Error::InvalidArgument("permutation is not a bijection".into()));
        }
    }
    Ok(())
}

/// PatchReorg: each channel is cut into a grid of `P x P` patches and the
/// patch at grid cell `(u, v)` moves to `((u + a_c) mod GH, (v + b_c) mod GW)`.
pub fn patch_reorg(s: &FeatureMap, shifts: &[(u32, u32)], p: usize) -> Result<FeatureMap> {
    let (c, h, w) = s.shape();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("{h}x{w} map not divisible into {p}x{p} patches")));
    }
    if shifts.len() != c {
        return Err(shape_err(format!("{} shifts for {c} channels", shifts.len())));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = FeatureMap::zeros(c, h, w);
    for (ch, &(a, b)) in shifts.iter().enumerate() {
        let (a, b) = (a as usize % gh, b as usize % gw);
        let src = s.channel(ch);
        let dst = out.channel_mut(ch);
        for u in 0..gh {
            let tu = (u + a) % gh;
            for v in 0..gw {
                let tv = (v + b) % gw;
                for r in 0..p {
                    let from = (u * p + r) * w + v * p;
                    let to = (tu * p + r) * w + tv * p;
                    dst[to..to + p].copy_from_slice(&src[from..from + p]);
                }
            }
        }
    }
    Ok(out)
}

/// Shifts that undo `shifts` on a `gh x gw` grid.
pub fn inverse_shifts(shifts: &[(u32, u32)], gh: usize, gw: usize) -> Vec<(u32, u32)> {
    shifts
        .iter()
        .map(|&(a, b)| (((gh - a as usize % gh) % gh) as u32, ((gw - b as usize % gw) % gw) as u32))
        .collect()
}

/// CrossMix: with shares as rows of `S (N x d)`, returns the rows of `M S`.
pub fn cross_mix(shares: &[FeatureMap], m: &[f64]) -> Result<Vec<FeatureMap>> {
    let n = shares.len();
    if n == 0 || m.len() != n * n {
        return Err(shape_err(format!("{}-entry mix matrix for {n} shares", m.len())));
    }
    for s in &shares[1..] {
        s.ensure_shape(&shares[0], "cross_mix shares")?;
    }
    let (c, h, w) = shares[0].shape();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut o = FeatureMap::zeros(c, h, w);
        for (j, s) in shares.iter().enumerate() {
            let a = m[i * n + j];
            if a != 0.0 {
                for (d, v) in o.data_mut().iter_mut().zip(s.data()) {
                    *d += a * v;
                }
            }
        }
        out.push(o);
    }
    flops::count(2 * (n * n * c * h * w) as u64);
    Ok(out)
}

/// Adjoint of [`cross_mix`]: returns `Mᵀ G` and accumulates `dM_ij = <G_i, S_j>`.
pub fn cross_mix_backward(
    inputs: &[FeatureMap],
    m: &[f64],
    grads: &[FeatureMap],
    grad_m: Option<&mut [f64]>,
) -> Result<Vec<FeatureMap>> {
    let n = inputs.len();
    if let Some(gm) = grad_m {
        for i in 0..n {
            for j in 0..n {
                gm[i * n + j] += grads[i].data().iter().zip(inputs[j].data()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    let mt: Vec<f64> = (0..n * n).map(|idx| m[(idx % n) * n + idx / n]).collect();
    cross_mix(grads, &mt)
}
