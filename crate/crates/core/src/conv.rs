//! Zero-padded "same" convolution primitives on single planes.
//!
//! Every convolution in the crate (encoder, depthwise LocConf, branch CNNs)
//! is built from these two kernels, so forward and backward passes share the
//! same boundary handling.

/// `out[y][x] += weight * inp[y + dy][x + dx]` wherever the source is in
/// bounds; out-of-bounds taps read zero.
#[inline]
pub fn shift_accumulate(out: &mut [f64], inp: &[f64], h: usize, w: usize, dy: isize, dx: isize, weight: f64) {
    if weight == 0.0 {
        return;
    }
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let o = &mut out[y * w + x0..y * w + x1];
        let s = &inp[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        for (a, b) in o.iter_mut().zip(s) {
            *a += weight * b;
        }
    }
}

/// `sum_{y,x} a[y][x] * b[y + dy][x + dx]` over in-bounds positions.
#[inline]
pub fn shifted_dot(a: &[f64], b: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = valid_range(h, dy);
    let (x0, x1) = valid_range(w, dx);
    if x0 >= x1 {
        return 0.0;
    }
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let ra = &a[y * w + x0..y * w + x1];
        let rb = &b[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        acc += ra.iter().zip(rb).map(|(p, q)| p * q).sum::<f64>();
    }
    acc
}

#[inline]
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

/// Offset of kernel tap `i` for an odd kernel of size `k`.
#[inline]
pub fn tap_offset(i: usize, k: usize) -> isize {
    i as isize - (k / 2) as isize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(inp: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (sy, sx) = (y + dy, x + dx);
                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    out[(y * w as isize + x) as usize] = inp[(sy * w as isize + sx) as usize];
                }
            }
        }
        out
    }

    #[test]
    fn shift_matches_naive() {
        let (h, w) = (5, 4);
        let inp: Vec<f64> = (0..h * w).map(|i| i as f64 * 0.5 - 3.0).collect();
        for dy in -3..=3 {
            for dx in -5..=5 {
                let mut out = vec![0.0; h * w];
                shift_accumulate(&mut out, &inp, h, w, dy, dx, 2.0);
                let expect: Vec<f64> = naive(&inp, h, w, dy, dx).iter().map(|v| 2.0 * v).collect();
                assert_eq!(out, expect, "dy {dy} dx {dx}");
                let a: Vec<f64> = (0..h * w).map(|i| (i % 3) as f64).collect();
                let d = shifted_dot(&a, &inp, h, w, dy, dx);
                let e: f64 = a.iter().zip(naive(&inp, h, w, dy, dx)).map(|(p, q)| p * q).sum();
                assert!((d - e).abs() < 1e-12);
            }
        }
    }
}
