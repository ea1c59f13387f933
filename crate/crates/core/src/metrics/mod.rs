//! Image-quality metrics and cost accounting.
//!
//! Two SSIM variants live here and are never mixed:
//!
//! * [`ssim`] is the evaluation metric: 11x11 Gaussian window (std 1.5),
//!   valid windows only, averaged over windows and channels. Images smaller
//!   than the window fall back to [`ssim_global`].
//! * [`ssim_global`] uses one window spanning the whole channel. It is cheap
//!   and has a closed-form gradient ([`ssim_global_grad`]), so the
//!   adversarial-training loss uses it.

pub mod flops;

use crate::error::{Error, Result};
use crate::tensor::{mse, FeatureMap};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP_DB: f64 = 99.0;

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &FeatureMap, y: &FeatureMap, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("psnr peak {peak}")));
    }
    let e = mse(x, y)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Windowed SSIM, mean over valid window positions and channels.
pub fn ssim(x: &FeatureMap, y: &FeatureMap) -> Result<f64> {
    x.ensure_shape(y, "ssim")?;
    let (c, h, w) = x.shape();
    if h < WINDOW || w < WINDOW {
        return ssim_global(x, y);
    }
    let g = gaussian_window();
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let (a, b) = (x.channel(ch), y.channel(ch));
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..WINDOW {
                    for j in 0..WINDOW {
                        let wt = g[i] * g[j];
                        let idx = (oy + i) * w + ox + j;
                        let (p, q) = (a[idx], b[idx]);
                        mx += wt * p;
                        my += wt * q;
                        xx += wt * p * p;
                        yy += wt * q * q;
                        xy += wt * (p * q);
                    }
                }
                total += ssim_formula(mx, my, xx - mx * mx, yy - my * my, xy - mx * my);
            }
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

struct GlobalStats {
    n: f64,
    mx: f64,
    my: f64,
    vx: f64,
    vy: f64,
    cxy: f64,
}

fn global_stats(a: &[f64], b: &[f64]) -> GlobalStats {
    let n = a.len() as f64;
    let mx = a.iter().sum::<f64>() / n;
    let my = b.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (p, q) in a.iter().zip(b) {
        vx += (p - mx) * (p - mx);
        vy += (q - my) * (q - my);
        cxy += (p - mx) * (q - my);
    }
    GlobalStats { n, mx, my, vx: vx / n, vy: vy / n, cxy: cxy / n }
}

/// SSIM with a single window covering each channel, averaged over channels.
pub fn ssim_global(x: &FeatureMap, y: &FeatureMap) -> Result<f64> {
    x.ensure_shape(y, "ssim_global")?;
    if x.is_empty() {
        return Err(Error::InvalidArgument("ssim of empty maps".into()));
    }
    let c = x.channels();
    let total: f64 = (0..c)
        .map(|ch| {
            let s = global_stats(x.channel(ch), y.channel(ch));
            ssim_formula(s.mx, s.my, s.vx, s.vy, s.cxy)
        })
        .sum();
    Ok(total / c as f64)
}

/// [`ssim_global`] and its gradient with respect to `y`.
pub fn ssim_global_grad(x: &FeatureMap, y: &FeatureMap) -> Result<(f64, FeatureMap)> {
    x.ensure_shape(y, "ssim_global_grad")?;
    if x.is_empty() {
        return Err(Error::InvalidArgument("ssim of empty maps".into()));
    }
    let c = x.channels();
    let mut grad = FeatureMap::zeros(c, x.height(), x.width());
    let mut total = 0.0;
    for ch in 0..c {
        let (a, b) = (x.channel(ch), y.channel(ch));
        let s = global_stats(a, b);
        let a1 = 2.0 * s.mx * s.my + SSIM_C1;
        let a2 = 2.0 * s.cxy + SSIM_C2;
        let b1 = s.mx * s.mx + s.my * s.my + SSIM_C1;
        let b2 = s.vx + s.vy + SSIM_C2;
        let v = a1 * a2 / (b1 * b2);
        total += v;
        let scale = v / (c as f64 * s.n);
        for ((g, p), q) in grad.channel_mut(ch).iter_mut().zip(a).zip(b) {
            let da1 = 2.0 * s.mx;
            let da2 = 2.0 * (p - s.mx);
            let db1 = 2.0 * s.my;
            let db2 = 2.0 * (q - s.my);
            *g = scale * (da1 / a1 + da2 / a2 - db1 / b1 - db2 / b2);
        }
    }
    Ok((total / c as f64, grad))
}

/// Mean and population std of a sample of metric values.
pub fn summarize(values: &[f64]) -> (f64, f64) {
    crate::tensor::mean_std(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn image(h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = SplitMix64::new(seed);
        FeatureMap::from_vec(1, h, w, (0..h * w).map(|_| rng.uniform()).collect()).unwrap()
    }

    fn checker(h: usize, w: usize) -> FeatureMap {
        let mut m = FeatureMap::zeros(1, h, w);
        for y in 0..h {
            for x in 0..w {
                m.set(0, y, x, ((y / 2 + x / 2) % 2) as f64);
            }
        }
        m
    }

    #[test]
    fn psnr_cases() {
        let x = image(8, 8, 1);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), 99.0);
        let y = x.map(|v| v + 0.1);
        assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let z = image(8, 8, 2);
        let e: f64 = x.data().iter().zip(z.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 64.0;
        assert!((psnr(&x, &z, 1.0).unwrap() - (-10.0 * e.log10())).abs() < 1e-6);
        assert!(psnr(&x, &z, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        for &(c, h, w) in &[(1, 16, 16), (3, 32, 32), (1, 8, 8), (2, 11, 13)] {
            let mut rng = SplitMix64::new(c as u64 * 100 + h as u64);
            let x = FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.uniform()).collect()).unwrap();
            let y = FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.uniform()).collect()).unwrap();
            assert_eq!(ssim(&x, &x).unwrap(), 1.0);
            assert_eq!(psnr(&x, &x, 1.0).unwrap(), 99.0);
            assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
            assert!(ssim(&x, &y).unwrap() <= 1.0);
        }
    }

    #[test]
    fn constant_vs_pattern_is_low() {
        let x = checker(16, 16);
        let y = FeatureMap::filled(1, 16, 16, 0.5);
        assert!(ssim(&x, &y).unwrap() < 0.3);
    }

    #[test]
    fn window_oracle() {
        // Direct evaluation at the single valid window of an 11x11 image.
        let x = image(11, 11, 3);
        let y = image(11, 11, 4);
        let g = gaussian_window();
        let mut s = [0.0; 5];
        for i in 0..11 {
            for j in 0..11 {
                let wt = g[i] * g[j];
                let (p, q) = (x.get(0, i, j), y.get(0, i, j));
                s[0] += wt * p;
                s[1] += wt * q;
                s[2] += wt * (p * p);
                s[3] += wt * (q * q);
                s[4] += wt * (p * q);
            }
        }
        let (mx, my) = (s[0], s[1]);
        let expect = ((2.0 * mx * my + 1e-4) * (2.0 * (s[4] - mx * my) + 9e-4))
            / ((mx * mx + my * my + 1e-4) * (s[2] - mx * mx + s[3] - my * my + 9e-4));
        assert!((ssim(&x, &y).unwrap() - expect).abs() < 1e-12);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_image_falls_back_to_global() {
        let x = image(8, 8, 5);
        let y = image(8, 8, 6);
        assert_eq!(ssim(&x, &y).unwrap(), ssim_global(&x, &y).unwrap());
    }

    #[test]
    fn ssim_decreases_with_noise() {
        let x = image(16, 16, 7);
        let mut prev = 1.0;
        for &sigma in &[0.05, 0.1, 0.2, 0.4] {
            let mut rng = SplitMix64::new(8);
            let noisy: Vec<f64> = x.data().iter().map(|v| v + sigma * rng.gaussian()).collect();
            let y = FeatureMap::from_vec(1, 16, 16, noisy).unwrap();
            let s = ssim(&x, &y).unwrap();
            assert!(s < prev, "sigma {sigma}: {s} !< {prev}");
            prev = s;
        }
    }

    #[test]
    fn global_grad_matches_finite_differences() {
        let mut rng = SplitMix64::new(9);
        let x = FeatureMap::from_vec(2, 4, 4, (0..32).map(|_| rng.uniform()).collect()).unwrap();
        let y = FeatureMap::from_vec(2, 4, 4, (0..32).map(|_| rng.uniform()).collect()).unwrap();
        let (v, g) = ssim_global_grad(&x, &y).unwrap();
        assert!((v - ssim_global(&x, &y).unwrap()).abs() < 1e-15);
        let eps = 1e-3;
        for i in 0..y.len() {
            let mut yp = y.clone();
            yp.data_mut()[i] += eps;
            let mut ym = y.clone();
            ym.data_mut()[i] -= eps;
            let num = (ssim_global(&x, &yp).unwrap() - ssim_global(&x, &ym).unwrap()) / (2.0 * eps);
            let rel = (g[i] - num).abs() / g[i].abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-3, "{i}: {} vs {num}", g[i]);
        }
    }
}
