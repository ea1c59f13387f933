//! Layers with hand-written forward and backward passes.

use crate::conv::{shift_accumulate, shifted_dot, tap_offset};
use crate::error::{shape_err, Result};
use crate::metrics::flops;
use crate::rng::SplitMix64;
use crate::tensor::FeatureMap;

/// Convolution with zero "same" padding. With stride `s` the output keeps
/// every `s`-th row and column of the stride-1 result, `ceil(H/s) x ceil(W/s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    /// `cout x cin x k x k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k, stride: 1, weight: vec![0.0; cout * cin * k * k], bias: vec![0.0; cout] }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    /// He-normal weights, zero bias.
    pub fn init(cin: usize, cout: usize, k: usize, rng: &mut SplitMix64) -> Self {
        let mut l = Self::zeros(cin, cout, k);
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        l.weight.iter_mut().for_each(|v| *v = std * rng.gaussian());
        l
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let (c, h, w) = x.shape();
        if c != self.cin {
            return Err(shape_err(format!("conv expects {} channels, got {c}", self.cin)));
        }
        let k = self.k;
        if self.stride > 1 {
            return Ok(self.forward_strided(x));
        }
        let mut out = FeatureMap::zeros(self.cout, h, w);
        for co in 0..self.cout {
            let dst = out.channel_mut(co);
            dst.iter_mut().for_each(|v| *v = self.bias[co]);
            for ci in 0..self.cin {
                let src = x.channel(ci);
                let taps = &self.weight[(co * self.cin + ci) * k * k..(co * self.cin + ci + 1) * k * k];
                for (t, &wt) in taps.iter().enumerate() {
                    shift_accumulate(dst, src, h, w, tap_offset(t / k, k), tap_offset(t % k, k), wt);
                }
            }
        }
        flops::count(flops::conv(self.cin, self.cout, k, h, w));
        Ok(out)
    }

    fn forward_strided(&self, x: &FeatureMap) -> FeatureMap {
        let (_, h, w) = x.shape();
        let (k, s) = (self.k, self.stride);
        let (ho, wo) = self.out_size(h, w);
        let mut out = FeatureMap::zeros(self.cout, ho, wo);
        for co in 0..self.cout {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = self.bias[co];
                    for ci in 0..self.cin {
                        let src = x.channel(ci);
                        let taps = &self.weight[(co * self.cin + ci) * k * k..(co * self.cin + ci + 1) * k * k];
                        for (t, &wt) in taps.iter().enumerate() {
                            let sy = (y * s) as isize + tap_offset(t / k, k);
                            let sx = (xo * s) as isize + tap_offset(t % k, k);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += wt * src[sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out.set(co, y, xo, acc);
                }
            }
        }
        flops::count(flops::conv(self.cin, self.cout, k, ho, wo));
        out
    }

    fn backward_strided(&self, x: &FeatureMap, gy: &FeatureMap, grad: &mut Conv2d, want_input: bool) -> Option<FeatureMap> {
        let (_, h, w) = x.shape();
        let (k, s) = (self.k, self.stride);
        let (ho, wo) = self.out_size(h, w);
        let mut gx = want_input.then(|| FeatureMap::zeros(self.cin, h, w));
        for co in 0..self.cout {
            let g = gy.channel(co);
            grad.bias[co] += g.iter().sum::<f64>();
            for ci in 0..self.cin {
                let base = (co * self.cin + ci) * k * k;
                let src = x.channel(ci);
                for t in 0..k * k {
                    let (dy, dx) = (tap_offset(t / k, k), tap_offset(t % k, k));
                    let wt = self.weight[base + t];
                    let mut acc = 0.0;
                    for y in 0..ho {
                        for xo in 0..wo {
                            let sy = (y * s) as isize + dy;
                            let sx = (xo * s) as isize + dx;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                let idx = sy as usize * w + sx as usize;
                                let gv = g[y * wo + xo];
                                acc += gv * src[idx];
                                if let Some(gx) = gx.as_mut() {
                                    gx.channel_mut(ci)[idx] += gv * wt;
                                }
                            }
                        }
                    }
                    grad.weight[base + t] += acc;
                }
            }
        }
        gx
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient
    /// when `want_input` is set.
    pub fn backward(&self, x: &FeatureMap, gy: &FeatureMap, grad: &mut Conv2d, want_input: bool) -> Option<FeatureMap> {
        if self.stride > 1 {
            return self.backward_strided(x, gy, grad, want_input);
        }
        let (_, h, w) = x.shape();
        let k = self.k;
        for co in 0..self.cout {
            let g = gy.channel(co);
            grad.bias[co] += g.iter().sum::<f64>();
            for ci in 0..self.cin {
                let base = (co * self.cin + ci) * k * k;
                for t in 0..k * k {
                    grad.weight[base + t] += shifted_dot(g, x.channel(ci), h, w, tap_offset(t / k, k), tap_offset(t % k, k));
                }
            }
        }
        if !want_input {
            return None;
        }
        let mut gx = FeatureMap::zeros(self.cin, h, w);
        for ci in 0..self.cin {
            let dst = gx.channel_mut(ci);
            for co in 0..self.cout {
                let g = gy.channel(co);
                let taps = &self.weight[(co * self.cin + ci) * k * k..(co * self.cin + ci + 1) * k * k];
                for (t, &wt) in taps.iter().enumerate() {
                    shift_accumulate(dst, g, h, w, -tap_offset(t / k, k), -tap_offset(t % k, k), wt);
                }
            }
        }
        Some(gx)
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&[f64]; 2] {
        [&self.weight, &self.bias]
    }
}

/// Fully connected layer, `y = W x + b` with `W` row-major `nout x nin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub nin: usize,
    pub nout: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(nin: usize, nout: usize) -> Self {
        Self { nin, nout, weight: vec![0.0; nin * nout], bias: vec![0.0; nout] }
    }

    pub fn init(nin: usize, nout: usize, rng: &mut SplitMix64) -> Self {
        let mut l = Self::zeros(nin, nout);
        let std = (2.0 / nin as f64).sqrt();
        l.weight.iter_mut().for_each(|v| *v = std * rng.gaussian());
        l
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.nin {
            return Err(shape_err(format!("dense expects {} inputs, got {}", self.nin, x.len())));
        }
        flops::count(flops::dense(self.nin, self.nout));
        Ok((0..self.nout)
            .map(|o| self.bias[o] + crate::linalg::dot(&self.weight[o * self.nin..(o + 1) * self.nin], x))
            .collect())
    }

    pub fn backward(&self, x: &[f64], gy: &[f64], grad: &mut Dense, want_input: bool) -> Option<Vec<f64>> {
        for (o, &g) in gy.iter().enumerate() {
            grad.bias[o] += g;
            if g != 0.0 {
                for (gw, xi) in grad.weight[o * self.nin..(o + 1) * self.nin].iter_mut().zip(x) {
                    *gw += g * xi;
                }
            }
        }
        want_input.then(|| {
            let mut gx = vec![0.0; self.nin];
            for (o, &g) in gy.iter().enumerate() {
                if g != 0.0 {
                    for (d, wv) in gx.iter_mut().zip(&self.weight[o * self.nin..(o + 1) * self.nin]) {
                        *d += g * wv;
                    }
                }
            }
            gx
        })
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&[f64]; 2] {
        [&self.weight, &self.bias]
    }
}

pub fn relu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Zeroes gradient entries where the pre-activation was not positive.
pub fn relu_backward_in_place(pre: &[f64], grad: &mut [f64]) {
    for (g, p) in grad.iter_mut().zip(pre) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Global average pool: one mean per channel.
pub fn global_avg_pool(x: &FeatureMap) -> Vec<f64> {
    let n = x.plane() as f64;
    (0..x.channels()).map(|c| x.channel(c).iter().sum::<f64>() / n).collect()
}

pub fn global_avg_pool_backward(g: &[f64], c: usize, h: usize, w: usize) -> FeatureMap {
    let n = (h * w) as f64;
    let mut out = FeatureMap::zeros(c, h, w);
    for (ch, &gv) in g.iter().enumerate() {
        out.channel_mut(ch).iter_mut().for_each(|v| *v = gv / n);
    }
    out
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy of softmax probabilities against `label`, and the gradient
/// with respect to the logits (`p - onehot`).
pub fn softmax_ce(probs: &[f64], label: usize) -> (f64, Vec<f64>) {
    let loss = -probs[label].max(1e-300).ln();
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    (loss, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_vec(n: usize, rng: &mut SplitMix64) -> Vec<f64> {
        (0..n).map(|_| rng.gaussian()).collect()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn naive_conv(l: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let (_, h, w) = x.shape();
        let k = l.k as isize;
        let mut out = FeatureMap::zeros(l.cout, h, w);
        for co in 0..l.cout {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = l.bias[co];
                    for ci in 0..l.cin {
                        for i in 0..k {
                            for j in 0..k {
                                let (sy, sx) = (y + i - k / 2, xx + j - k / 2);
                                if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                    let wi = ((co * l.cin + ci) * l.k + i as usize) * l.k + j as usize;
                                    acc += l.weight[wi] * x.get(ci, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out.set(co, y as usize, xx as usize, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loops() {
        let mut rng = SplitMix64::new(1);
        let mut l = Conv2d::init(2, 3, 3, &mut rng);
        l.bias = rand_vec(3, &mut rng);
        let x = FeatureMap::from_vec(2, 5, 6, rand_vec(60, &mut rng)).unwrap();
        let a = l.forward(&x).unwrap();
        let b = naive_conv(&l, &x);
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn conv_gradients() {
        let mut rng = SplitMix64::new(2);
        let mut l = Conv2d::init(2, 3, 3, &mut rng);
        l.bias = rand_vec(3, &mut rng);
        let x = FeatureMap::from_vec(2, 4, 4, rand_vec(32, &mut rng)).unwrap();
        let probe = FeatureMap::from_vec(3, 4, 4, rand_vec(48, &mut rng)).unwrap();
        let f = |l: &Conv2d, x: &FeatureMap| -> f64 {
            l.forward(x).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Conv2d::zeros(2, 3, 3);
        let gx = l.backward(&x, &probe, &mut g, true).unwrap();
        let eps = 1e-3;
        for i in 0..l.weight.len() {
            let (mut p, mut m) = (l.clone(), l.clone());
            p.weight[i] += eps;
            m.weight[i] -= eps;
            assert!(rel(g.weight[i], (f(&p, &x) - f(&m, &x)) / (2.0 * eps)) < 1e-3);
        }
        for i in 0..3 {
            let (mut p, mut m) = (l.clone(), l.clone());
            p.bias[i] += eps;
            m.bias[i] -= eps;
            assert!(rel(g.bias[i], (f(&p, &x) - f(&m, &x)) / (2.0 * eps)) < 1e-3);
        }
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            assert!(rel(gx[i], (f(&l, &p) - f(&l, &m)) / (2.0 * eps)) < 1e-3);
        }
    }

    #[test]
    fn strided_conv_subsamples_stride_one() {
        let mut rng = SplitMix64::new(3);
        let mut l = Conv2d::init(2, 3, 3, &mut rng);
        l.bias = rand_vec(3, &mut rng);
        let x = FeatureMap::from_vec(2, 5, 6, rand_vec(60, &mut rng)).unwrap();
        let full = naive_conv(&l, &x);
        let s = l.clone().with_stride(2);
        let y = s.forward(&x).unwrap();
        assert_eq!(y.shape(), (3, 3, 3));
        for c in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    assert!((y.get(c, i, j) - full.get(c, 2 * i, 2 * j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn strided_conv_gradients() {
        let mut rng = SplitMix64::new(4);
        let mut l = Conv2d::init(2, 3, 3, &mut rng).with_stride(2);
        l.bias = rand_vec(3, &mut rng);
        let x = FeatureMap::from_vec(2, 5, 4, rand_vec(40, &mut rng)).unwrap();
        let probe = FeatureMap::from_vec(3, 3, 2, rand_vec(18, &mut rng)).unwrap();
        let f = |l: &Conv2d, x: &FeatureMap| -> f64 {
            l.forward(x).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Conv2d::zeros(2, 3, 3);
        let gx = l.backward(&x, &probe, &mut g, true).unwrap();
        let eps = 1e-3;
        for i in 0..l.weight.len() {
            let (mut p, mut m) = (l.clone(), l.clone());
            p.weight[i] += eps;
            m.weight[i] -= eps;
            assert!(rel(g.weight[i], (f(&p, &x) - f(&m, &x)) / (2.0 * eps)) < 1e-3);
        }
        for i in 0..3 {
            let (mut p, mut m) = (l.clone(), l.clone());
            p.bias[i] += eps;
            m.bias[i] -= eps;
            assert!(rel(g.bias[i], (f(&p, &x) - f(&m, &x)) / (2.0 * eps)) < 1e-3);
        }
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            assert!(rel(gx[i], (f(&l, &p) - f(&l, &m)) / (2.0 * eps)) < 1e-3);
        }
    }

    #[test]
    fn dense_gradients() {
        let mut rng = SplitMix64::new(3);
        let mut l = Dense::init(5, 4, &mut rng);
        l.bias = rand_vec(4, &mut rng);
        let x = rand_vec(5, &mut rng);
        let probe = rand_vec(4, &mut rng);
        let f = |l: &Dense, x: &[f64]| -> f64 { l.forward(x).unwrap().iter().zip(&probe).map(|(a, b)| a * b).sum() };
        let mut g = Dense::zeros(5, 4);
        let gx = l.backward(&x, &probe, &mut g, true).unwrap();
        let eps = 1e-3;
        for i in 0..l.weight.len() {
            let (mut p, mut m) = (l.clone(), l.clone());
            p.weight[i] += eps;
            m.weight[i] -= eps;
            assert!(rel(g.weight[i], (f(&p, &x) - f(&m, &x)) / (2.0 * eps)) < 1e-3);
        }
        for i in 0..5 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += eps;
            m[i] -= eps;
            assert!(rel(gx[i], (f(&l, &p) - f(&l, &m)) / (2.0 * eps)) < 1e-3);
        }
    }

    #[test]
    fn relu_and_pool_gradients() {
        let mut rng = SplitMix64::new(4);
        let x = FeatureMap::from_vec(3, 4, 4, rand_vec(48, &mut rng)).unwrap();
        let probe = rand_vec(3, &mut rng);
        let f = |x: &FeatureMap| -> f64 {
            let r = x.map(|v| v.max(0.0));
            global_avg_pool(&r).iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut g = global_avg_pool_backward(&probe, 3, 4, 4);
        relu_backward_in_place(x.data(), g.data_mut());
        let eps = 1e-4;
        for i in 0..x.len() {
            if x[i].abs() < 2.0 * eps {
                continue;
            }
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let num = (f(&p) - f(&m)) / (2.0 * eps);
            assert!((g[i] - num).abs() < 1e-8, "{i}");
        }
    }

    #[test]
    fn softmax_ce_gradient() {
        let logits = [0.3, -1.2, 2.0, 0.5];
        let p = softmax(&logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (_, g) = softmax_ce(&p, 2);
        let eps = 1e-4;
        for i in 0..4 {
            let (mut a, mut b) = (logits, logits);
            a[i] += eps;
            b[i] -= eps;
            let num = (softmax_ce(&softmax(&a), 2).0 - softmax_ce(&softmax(&b), 2).0) / (2.0 * eps);
            assert!(rel(g[i], num) < 1e-3);
        }
        let confident = softmax(&[50.0, 0.0, 0.0]);
        let (loss, g) = softmax_ce(&confident, 0);
        assert!(loss < 1e-12 && g.iter().all(|v| v.abs() < 1e-12));
    }
}
