//! Small dense linear algebra for the m×m and k×k matrices that appear in the
//! flow and variance computations.
//!
//! Dimensions here are tiny (slow dimension and parameter dimension), so
//! everything is row-major `Vec<f64>` with plain loops.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::sqrt;

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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data has wrong length");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        matmul_into(&self.data, &other.data, self.rows, self.cols, other.cols, &mut out.data);
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Replaces the matrix with `(A + Aᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        assert_eq!(self.rows, self.cols);
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = avg;
                self.data[j * n + i] = avg;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out = a (n×m) * b (m×p)`.
#[inline]
pub fn matmul_into(a: &[f64], b: &[f64], n: usize, m: usize, p: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..p {
            let mut acc = 0.0;
            for l in 0..m {
                acc += a[i * m + l] * b[l * p + j];
            }
            out[i * p + j] = acc;
        }
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix, or `None`
/// when a pivot is not strictly positive.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = sqrt(d);
        l[j * n + j] = djj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b` in place given the lower factor.
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Inverse of an SPD matrix through its Cholesky factor.
///
/// If the factorization fails, one retry is made with `1e-12·trace/n` added to
/// the diagonal. Returns `None` if that fails as well.
pub fn spd_inverse(a: &Mat) -> Option<Mat> {
    let n = a.rows();
    assert_eq!(n, a.cols());
    let l = match cholesky(a.as_slice(), n) {
        Some(l) => l,
        None => {
            let jitter = 1e-12 * a.trace().abs() / n as f64;
            let mut b = a.clone();
            for i in 0..n {
                let v = b.get(i, i) + jitter;
                b.set(i, i, v);
            }
            cholesky(b.as_slice(), n)?
        }
    };
    let mut inv = Mat::zeros(n, n);
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.iter_mut().for_each(|v| *v = 0.0);
        col[j] = 1.0;
        cholesky_solve(&l, n, &mut col);
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
    }
    inv.symmetrize();
    Some(inv)
}

/// Inverse of a general square matrix by LU with partial pivoting.
pub fn inverse(a: &[f64], n: usize) -> Option<Vec<f64>> {
    if n == 1 {
        return if a[0] != 0.0 { Some(vec![1.0 / a[0]]) } else { None };
    }
    let mut lu = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut piv = k;
        let mut best = lu[k * n + k].abs();
        for i in (k + 1)..n {
            let v = lu[i * n + k].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return None;
        }
        if piv != k {
            for j in 0..n {
                lu.swap(k * n + j, piv * n + j);
            }
            perm.swap(k, piv);
        }
        let d = lu[k * n + k];
        for i in (k + 1)..n {
            let f = lu[i * n + k] / d;
            lu[i * n + k] = f;
            for j in (k + 1)..n {
                lu[i * n + j] -= f * lu[k * n + j];
            }
        }
    }
    let mut inv = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        for i in 0..n {
            col[i] = if perm[i] == j { 1.0 } else { 0.0 };
        }
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s -= lu[i * n + k] * col[k];
            }
            col[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in (i + 1)..n {
                s -= lu[i * n + k] * col[k];
            }
            col[i] = s / lu[i * n + i];
        }
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    Some(inv)
}

/// Eigenvalues of a symmetric matrix (cyclic Jacobi), ascending.
pub fn symmetric_eigenvalues(a: &Mat) -> Vec<f64> {
    let n = a.rows();
    assert_eq!(n, a.cols());
    if n == 1 {
        return vec![a.get(0, 0)];
    }
    let mut m = a.clone();
    m.symmetrize();
    let d = m.as_mut_slice();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += d[i * n + j] * d[i * n + j];
            }
        }
        if off < 1e-300 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = d[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = d[p * n + p];
                let aqq = d[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = d[k * n + p];
                    let akq = d[k * n + q];
                    d[k * n + p] = c * akp - s * akq;
                    d[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = d[p * n + k];
                    let aqk = d[q * n + k];
                    d[p * n + k] = c * apk - s * aqk;
                    d[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| d[i * n + i]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    ev
}

pub fn min_eigenvalue(a: &Mat) -> f64 {
    symmetric_eigenvalues(a)[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_inverse_roundtrip() {
        let a = Mat::from_row_major(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let inv = spd_inverse(&a).unwrap();
        let prod = a.matmul(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod.get(i, j) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn not_positive_definite() {
        let a = Mat::from_row_major(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky(a.as_slice(), 2).is_none());
        assert!(spd_inverse(&a).is_none());
    }

    #[test]
    fn lu_inverse_general() {
        let a = [0.0, 2.0, 1.0, 1.0, 0.0, 3.0, 2.0, 1.0, 0.0];
        let inv = inverse(&a, 3).unwrap();
        let mut prod = [0.0; 9];
        matmul_into(&a, &inv, 3, 3, 3, &mut prod);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * 3 + j] - expect).abs() < 1e-14);
            }
        }
        assert!(inverse(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }

    #[test]
    fn jacobi_eigenvalues() {
        // eigenvalues of [[2,1],[1,2]] are 1 and 3
        let a = Mat::from_row_major(2, 2, vec![2.0, 1.0, 1.0, 2.0]);
        let ev = symmetric_eigenvalues(&a);
        assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] - 3.0).abs() < 1e-14);
        let b = Mat::from_row_major(3, 3, vec![2.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 2.0]);
        let ev = symmetric_eigenvalues(&b);
        let s2 = sqrt(2.0);
        for (got, want) in ev.iter().zip([2.0 - s2, 2.0, 2.0 + s2]) {
            assert!((got - want).abs() < 1e-13);
        }
    }
}
