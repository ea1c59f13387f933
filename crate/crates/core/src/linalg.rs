//! Small dense linear algebra in `f64`: just what the policy generator and
//! the ridge attacker need.

use crate::error::{shape_err, Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// Fills in row-major order, so stateful generators are reproducible.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(shape_err(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Householder QR of a square matrix, with column signs flipped so that
    /// `R` has a non-negative diagonal. Returns `(Q, R)`.
    pub fn householder_qr(&self) -> Result<(Mat, Mat)> {
        let n = self.rows;
        if n != self.cols {
            return Err(shape_err("householder_qr expects a square matrix"));
        }
        let mut r = self.clone();
        let mut q = Mat::identity(n);
        for k in 0..n.saturating_sub(1) {
            let norm = (k..n).map(|i| r[(i, k)] * r[(i, k)]).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let alpha = if r[(k, k)] > 0.0 { -norm } else { norm };
            let mut v: Vec<f64> = (k..n).map(|i| r[(i, k)]).collect();
            v[0] -= alpha;
            let vnorm2: f64 = v.iter().map(|x| x * x).sum();
            if vnorm2 == 0.0 {
                continue;
            }
            // R <- H R
            for j in 0..n {
                let s: f64 = (k..n).map(|i| v[i - k] * r[(i, j)]).sum::<f64>() * 2.0 / vnorm2;
                for i in k..n {
                    r[(i, j)] -= s * v[i - k];
                }
            }
            // Q <- Q H
            for i in 0..n {
                let s: f64 = (k..n).map(|j| q[(i, j)] * v[j - k]).sum::<f64>() * 2.0 / vnorm2;
                for j in k..n {
                    q[(i, j)] -= s * v[j - k];
                }
            }
        }
        for k in 0..n {
            if r[(k, k)] < 0.0 {
                for j in 0..n {
                    r[(k, j)] = -r[(k, j)];
                }
                for i in 0..n {
                    q[(i, k)] = -q[(i, k)];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                r[(i, j)] = 0.0;
            }
        }
        Ok((q, r))
    }

    /// Lower-triangular Cholesky factor `L` with `L Lᵀ = self`.
    pub fn cholesky(&self) -> Result<Mat> {
        let n = self.rows;
        if n != self.cols {
            return Err(shape_err("cholesky expects a square matrix"));
        }
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::NotPositiveDefinite(j));
            }
            d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let s = self[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
                l[(i, j)] = s / d;
            }
        }
        Ok(l)
    }

    /// Solve `(L Lᵀ) X = B` in place on `B` given the Cholesky factor `L`.
    pub fn cholesky_solve(l: &Mat, b: &mut Mat) -> Result<()> {
        let n = l.rows;
        if b.rows != n {
            return Err(shape_err("cholesky_solve rhs rows"));
        }
        let m = b.cols;
        // forward: L Y = B
        for i in 0..n {
            for k in 0..i {
                let lik = l[(i, k)];
                if lik == 0.0 {
                    continue;
                }
                let (head, tail) = b.data.split_at_mut(i * m);
                let src = &head[k * m..(k + 1) * m];
                for (t, s) in tail[..m].iter_mut().zip(src) {
                    *t -= lik * s;
                }
            }
            let inv = 1.0 / l[(i, i)];
            b.row_mut(i).iter_mut().for_each(|v| *v *= inv);
        }
        // backward: Lᵀ X = Y
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = l[(k, i)];
                if lki == 0.0 {
                    continue;
                }
                let (head, tail) = b.data.split_at_mut(k * m);
                let dst = &mut head[i * m..(i + 1) * m];
                for (d, s) in dst.iter_mut().zip(&tail[..m]) {
                    *d -= lki * s;
                }
            }
            let inv = 1.0 / l[(i, i)];
            b.row_mut(i).iter_mut().for_each(|v| *v *= inv);
        }
        Ok(())
    }

    /// Determinant by LU with partial pivoting.
    pub fn determinant(&self) -> Result<f64> {
        let n = self.rows;
        if n != self.cols {
            return Err(shape_err("determinant expects a square matrix"));
        }
        let mut a = self.clone();
        let mut det = 1.0;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[(i, k)].abs().partial_cmp(&a[(j, k)].abs()).unwrap())
                .unwrap();
            if a[(p, k)] == 0.0 {
                return Ok(0.0);
            }
            if p != k {
                a.swap_rows(p, k);
                det = -det;
            }
            det *= a[(k, k)];
            for i in k + 1..n {
                let f = a[(i, k)] / a[(k, k)];
                for j in k..n {
                    a[(i, j)] -= f * a[(k, j)];
                }
            }
        }
        Ok(det)
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Mat> {
        let n = self.rows;
        if n != self.cols {
            return Err(shape_err("inverse expects a square matrix"));
        }
        let mut a = self.clone();
        let mut inv = Mat::identity(n);
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[(i, k)].abs().partial_cmp(&a[(j, k)].abs()).unwrap())
                .unwrap();
            if a[(p, k)].abs() < 1e-12 {
                return Err(Error::Singular);
            }
            a.swap_rows(p, k);
            inv.swap_rows(p, k);
            let pivot = a[(k, k)];
            for j in 0..n {
                a[(k, j)] /= pivot;
                inv[(k, j)] /= pivot;
            }
            for i in 0..n {
                if i != k {
                    let f = a[(i, k)];
                    if f != 0.0 {
                        for j in 0..n {
                            a[(i, j)] -= f * a[(k, j)];
                            inv[(i, j)] -= f * inv[(k, j)];
                        }
                    }
                }
            }
        }
        Ok(inv)
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a != b {
            for j in 0..self.cols {
                self.data.swap(a * self.cols + j, b * self.cols + j);
            }
        }
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(n: usize, m: usize, seed: u64) -> Mat {
        let mut rng = SplitMix64::new(seed);
        Mat::from_fn(n, m, |_, _| rng.gaussian())
    }

    #[test]
    fn qr_reconstructs() {
        let a = random(7, 7, 1);
        let (q, r) = a.householder_qr().unwrap();
        assert!(q.matmul(&r).unwrap().max_abs_diff(&a) < 1e-10);
        assert!(q.matmul(&q.transpose()).unwrap().max_abs_diff(&Mat::identity(7)) < 1e-12);
        for i in 0..7 {
            assert!(r[(i, i)] >= 0.0);
        }
    }

    #[test]
    fn cholesky_solves() {
        let a = random(9, 5, 2);
        let mut g = a.transpose().matmul(&a).unwrap();
        for i in 0..5 {
            g[(i, i)] += 0.1;
        }
        let l = g.cholesky().unwrap();
        let b = random(5, 3, 3);
        let mut x = b.clone();
        Mat::cholesky_solve(&l, &mut x).unwrap();
        assert!(g.matmul(&x).unwrap().max_abs_diff(&b) < 1e-10);
        assert!(g.inverse().unwrap().matmul(&b).unwrap().max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = Mat::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(m.cholesky(), Err(Error::NotPositiveDefinite(1))));
    }

    #[test]
    fn determinant_known() {
        let m = Mat::from_vec(3, 3, vec![2.0, 0.0, 1.0, 1.0, 3.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
        // 2(3-2) - 0 + 1(1-3) = 0
        assert!(m.determinant().unwrap().abs() < 1e-12);
        let p = Mat::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((p.determinant().unwrap() + 1.0).abs() < 1e-12);
    }
}
