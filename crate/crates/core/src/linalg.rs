//! Dense row-major `f64` matrices and a one-sided Jacobi SVD.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// A single row vector.
    pub fn row(data: Vec<f64>) -> Self {
        let cols = data.len();
        Matrix { rows: 1, cols, data }
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m.data[i * d.len() + i] = v;
        }
        m
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension mismatch");
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out.data[i * n + j] = dot(a, b);
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension mismatch");
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| f64::max(m, libm::fabs(a - b)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column `c` multiplied by `s[c]`, i.e. `self · diag(s)`.
    pub fn mul_cols(&self, s: &[f64]) -> Matrix {
        assert_eq!(self.cols, s.len());
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, f) in out.data[r * self.cols..(r + 1) * self.cols].iter_mut().zip(s) {
                *v *= f;
            }
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin singular value decomposition `A = U · diag(s) · Vt` with `r = min(m, n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Svd {
    /// m × r, orthonormal columns.
    pub u: Matrix,
    /// r singular values, non-increasing.
    pub s: Vec<f64>,
    /// r × n, orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        self.u.mul_cols(&self.s).matmul(&self.vt)
    }
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::Shape("svd of an empty matrix".into()));
    }
    if a.rows < a.cols {
        let t = svd(&a.transpose())?;
        return Ok(Svd { u: t.vt.transpose(), s: t.s, vt: t.u.transpose() });
    }
    let (m, n) = (a.rows, a.cols);
    // Work column-major: columns of A and of V as contiguous vectors.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| (0..m).map(|r| a.get(r, c)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    let eps = f64::EPSILON;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || libm::fabs(gamma) <= eps * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = libm::copysign(1.0, zeta) / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| libm::sqrt(dot(c, c))).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(core::cmp::Ordering::Equal).then(i.cmp(&j)));

    let largest = norms.iter().cloned().fold(0.0, f64::max);
    let tiny = largest * eps * (m as f64);
    let mut u = Matrix::zeros(m, n);
    let mut vt = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > tiny && sigma > 0.0 {
            for r in 0..m {
                u.set(r, k, cols[j][r] / sigma);
            }
            s.push(sigma);
        } else {
            degenerate.push(k);
            s.push(0.0);
        }
        for c in 0..n {
            vt.set(k, c, v[j][c]);
        }
    }
    if !degenerate.is_empty() {
        complete_orthonormal_columns(&mut u, &degenerate);
    }
    Ok(Svd { u, s, vt })
}

fn rotate(vecs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = vecs.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fill the listed columns of `u` with unit vectors orthogonal to all other columns.
fn complete_orthonormal_columns(u: &mut Matrix, missing: &[usize]) {
    let (m, n) = u.shape();
    let mut filled: Vec<usize> = (0..n).filter(|c| !missing.contains(c)).collect();
    let mut candidate = 0usize;
    for &col in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes for stability.
            for _ in 0..2 {
                for &f in &filled {
                    let proj: f64 = (0..m).map(|r| u.get(r, f) * e[r]).sum();
                    for (r, x) in e.iter_mut().enumerate() {
                        *x -= proj * u.get(r, f);
                    }
                }
            }
            let norm = libm::sqrt(dot(&e, &e));
            if norm > 1e-8 {
                for (r, x) in e.iter().enumerate() {
                    u.set(r, col, x / norm);
                }
                filled.push(col);
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn orthonormality_error(m: &Matrix) -> f64 {
        m.matmul_tn(m).max_abs_diff(&Matrix::identity(m.cols))
    }

    #[test]
    fn diagonal_input_gives_its_diagonal() {
        let d = svd(&Matrix::from_diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(d.s, vec![3.0, 2.0, 1.0]);
        assert_eq!(d.reconstruct(), Matrix::from_diag(&[3.0, 2.0, 1.0]));
    }

    #[test]
    fn unsorted_diagonal_is_sorted_descending() {
        let d = svd(&Matrix::from_diag(&[1.0, 5.0, 2.0])).unwrap();
        assert_eq!(d.s, vec![5.0, 2.0, 1.0]);
        assert!(d.reconstruct().max_abs_diff(&Matrix::from_diag(&[1.0, 5.0, 2.0])) < 1e-15);
    }

    #[test]
    fn random_square_reconstructs_to_1e12() {
        let a = random(8, 8, 1);
        let d = svd(&a).unwrap();
        assert!(d.reconstruct().max_abs_diff(&a) <= 1e-12);
        assert!(orthonormality_error(&d.u) < 1e-12);
        assert!(orthonormality_error(&d.vt.transpose()) < 1e-12);
        assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn tall_and_wide_shapes() {
        for &(m, n) in &[(4usize, 3usize), (3, 4), (32, 128), (128, 32), (1, 5)] {
            let a = random(m, n, (m * 100 + n) as u64);
            let d = svd(&a).unwrap();
            assert_eq!(d.s.len(), m.min(n));
            assert_eq!(d.u.shape(), (m, m.min(n)));
            assert_eq!(d.vt.shape(), (m.min(n), n));
            assert!(d.reconstruct().max_abs_diff(&a) <= 1e-12, "{m}x{n}");
        }
    }

    #[test]
    fn rank_deficient_keeps_orthonormal_u() {
        let mut a = random(5, 3, 9);
        for r in 0..5 {
            let v = a.get(r, 0);
            a.set(r, 2, 2.0 * v);
        }
        let d = svd(&a).unwrap();
        assert!(d.s[2] < 1e-12);
        assert!(orthonormality_error(&d.u) < 1e-10);
        assert!(d.reconstruct().max_abs_diff(&a) <= 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let d = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(d.s, vec![0.0, 0.0]);
        assert!(orthonormality_error(&d.u) < 1e-12);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut a = Matrix::zeros(2, 2);
        a.set(0, 1, f64::NAN);
        assert!(matches!(svd(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn matmul_variants_agree() {
        let a = random(3, 4, 2);
        let b = random(5, 4, 3);
        let c = random(3, 6, 4);
        assert!(a.matmul_nt(&b).max_abs_diff(&a.matmul(&b.transpose())) < 1e-15);
        assert!(a.matmul_tn(&c).max_abs_diff(&a.transpose().matmul(&c)) < 1e-15);
    }
}
