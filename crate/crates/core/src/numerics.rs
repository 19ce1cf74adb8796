//! Dense vectors and matrices, stable reductions, Cholesky factorization and
//! multivariate normal sampling.
//!
//! Shape mismatches are programming errors and panic; data-dependent failures
//! (a matrix that will not factor) are returned as [`Error`]s.

use std::ops::{Deref, DerefMut, Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::Rng;

/// Upper end of the Cholesky jitter ladder.
pub const MAX_JITTER: f64 = 1e-4;
/// First rung used when the caller-supplied jitter is zero.
pub const MIN_JITTER: f64 = 1e-8;
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Vector(v)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(contract(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(contract("matrix entries must be finite"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(contract("ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Matrix::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        out
    }

    /// `self * otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch");
        Matrix::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j)))
    }

    /// `selfᵀ * other`.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aki) in a.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                for (oij, &bkj) in out.row_mut(i).iter_mut().zip(b) {
                    *oij += aki * bkj;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mul_vec shape mismatch");
        self.row_iter().map(|r| dot(r, v)).collect()
    }

    pub fn t_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "t_mul_vec shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, &vi) in self.row_iter().zip(v) {
            axpy(vi, r, &mut out);
        }
        out
    }

    /// `vᵀ · self · v` for square `self`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        assert_eq!(self.rows, self.cols);
        assert_eq!(self.cols, v.len(), "quad_form shape mismatch");
        self.row_iter().zip(v).map(|(r, &vi)| vi * dot(r, v)).sum()
    }

    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        axpy(s, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += s · a bᵀ`.
    pub fn add_outer(&mut self, s: f64, a: &[f64], b: &[f64]) {
        assert_eq!((self.rows, self.cols), (a.len(), b.len()), "outer shape mismatch");
        for (i, &ai) in a.iter().enumerate() {
            axpy(s * ai, b, self.row_mut(i));
        }
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn max_asymmetry(&self) -> f64 {
        assert!(self.is_square());
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                let m = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = m;
                self[(j, i)] = m;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        max_abs_diff(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Smallest eigenvalue of a symmetric matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        assert!(self.is_square());
        if self.rows == 0 {
            return 0.0;
        }
        let m = nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data);
        m.symmetric_eigenvalues().min()
    }

    /// Projects a symmetric matrix onto the PSD cone: symmetrize, then clamp
    /// negative eigenvalues to zero. Matrices that are already symmetric PSD
    /// are returned untouched.
    pub fn psd_repair(&mut self) {
        if self.max_asymmetry() > 0.0 {
            self.symmetrize();
        }
        if self.rows == 0 || self.min_eigenvalue() >= 0.0 {
            return;
        }
        let m = nalgebra::DMatrix::from_row_slice(self.rows, self.cols, &self.data);
        let eig = m.symmetric_eigen();
        let vals = eig.eigenvalues.map(|l| l.max(0.0));
        let rebuilt = &eig.eigenvectors
            * nalgebra::DMatrix::from_diagonal(&vals)
            * eig.eigenvectors.transpose();
        for i in 0..self.rows {
            for j in 0..self.cols {
                self[(i, j)] = rebuilt[(i, j)];
            }
        }
        self.symmetrize();
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot length mismatch");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += s · x`.
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    assert_eq!(x.len(), y.len(), "axpy length mismatch");
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `log Σ exp(v_k)` with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    assert!(!v.is_empty(), "log_sum_exp of an empty vector");
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "softmax of an empty vector");
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Cosine similarity clamped to [-1, 1]; zero when either vector is
/// (numerically) zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine length mismatch");
    let na = norm(a);
    let nb = norm(b);
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Lower-triangular factor `L` with `L Lᵀ = m + jitter·I`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    pub lower: Matrix,
    /// Jitter actually added to the diagonal.
    pub jitter: f64,
}

fn try_cholesky(m: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)] + jitter;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Cholesky factorization of a symmetric, approximately PSD matrix.
///
/// Tries `jitter` first, then escalates geometrically (x10, starting at
/// [`MIN_JITTER`] when `jitter` is zero) up to [`MAX_JITTER`].
pub fn cholesky_psd(m: &Matrix, jitter: f64) -> Result<CholeskyFactor> {
    if !m.is_square() {
        return Err(contract(format!("cholesky of non-square {:?}", m.shape())));
    }
    if m.max_asymmetry() > SYMMETRY_TOL {
        return Err(contract("cholesky of asymmetric matrix"));
    }
    if !(jitter >= 0.0) {
        return Err(contract("negative jitter"));
    }
    let mut j = jitter;
    loop {
        if let Some(lower) = try_cholesky(m, j) {
            return Ok(CholeskyFactor { lower, jitter: j });
        }
        j = if j < MIN_JITTER { MIN_JITTER } else { j * 10.0 };
        if j > MAX_JITTER * (1.0 + 1e-9) {
            return Err(Error::Singular { jitter: MAX_JITTER });
        }
    }
}

/// Draws from `N(mean, cov)` with a cached factor.
#[derive(Clone, Debug)]
pub struct MvnSampler {
    mean: Vec<f64>,
    /// `None` for a degenerate (all-zero) covariance.
    factor: Option<Matrix>,
}

impl MvnSampler {
    pub fn new(mean: &[f64], cov: &Matrix) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(contract(format!(
                "mvn dimension mismatch: mean {} cov {:?}",
                mean.len(),
                cov.shape()
            )));
        }
        let factor = if cov.as_slice().iter().all(|&x| x == 0.0) {
            None
        } else {
            Some(cholesky_psd(cov, 0.0)?.lower)
        };
        Ok(MvnSampler {
            mean: mean.to_vec(),
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Lower Cholesky factor, `None` for a zero covariance.
    pub fn factor(&self) -> Option<&Matrix> {
        self.factor.as_ref()
    }

    pub fn sample_into(&self, rng: &mut Rng, z: &mut [f64], out: &mut [f64]) {
        out.copy_from_slice(&self.mean);
        let Some(l) = &self.factor else { return };
        for zi in z.iter_mut() {
            *zi = rng.normal();
        }
        for (i, oi) in out.iter_mut().enumerate() {
            let row = l.row(i);
            *oi += dot(&row[..=i], &z[..=i]);
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Vector {
        let n = self.dim();
        let mut z = vec![0.0; n];
        let mut out = vec![0.0; n];
        self.sample_into(rng, &mut z, &mut out);
        Vector(out)
    }
}

/// One draw `mean + L z` from `N(mean, cov)`.
pub fn sample_mvn(mean: &[f64], cov: &Matrix, rng: &mut Rng) -> Result<Vector> {
    Ok(MvnSampler::new(mean, cov)?.sample(rng))
}

/// Central-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + step;
            let up = f(&p);
            p[k] = x[k] - step;
            let dn = f(&p);
            p[k] = x[k];
            (up - dn) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(&sub(a, b));
    let s = norm(a).max(norm(b));
    if s == 0.0 {
        0.0
    } else {
        d / s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn naive_lse(v: &[f64]) -> f64 {
        v.iter().map(|x| x.exp()).sum::<f64>().ln()
    }

    fn random_psd(n: usize, rng: &mut Rng) -> Matrix {
        let a = Matrix::from_fn(n, n, |_, _| rng.normal());
        a.t_matmul(&a)
    }

    #[test]
    fn central_difference_of_cubic() {
        let g = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-4);
        assert_abs_diff_eq!(g[0], 12.0, epsilon = 1e-7);
        assert_abs_diff_eq!(g[1], 2.0, epsilon = 1e-9);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert_abs_diff_eq!(relative_error(&[3.0, 4.0], &[3.0, 4.5]), 0.5 / 29.25f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn lse_examples() {
        assert_abs_diff_eq!(log_sum_exp(&[0.0, 0.0]), 2f64.ln(), epsilon = 1e-15);
        assert_eq!(log_sum_exp(&[3.25]), 3.25);
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let v: Vec<f64> = (0..10).map(|_| rng.uniform_in(-5.0, 5.0)).collect();
            let a = log_sum_exp(&v);
            let b = naive_lse(&v);
            assert!(((a - b) / b).abs() < 1e-14, "{a} vs {b}");
        }
        // overflow-free at the edges of the double range
        assert_abs_diff_eq!(log_sum_exp(&[700.0, 700.0]), 700.0 + 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(log_sum_exp(&[-700.0, -700.0]), -700.0 + 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    #[should_panic]
    fn lse_empty_panics() {
        log_sum_exp(&[]);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0, 0.0]);
        for x in s {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax(&[1000.0, 0.0]);
        assert_eq!(s[0], 1.0);
        assert!(s[1] >= 0.0 && s[1] < 1e-300);
        let mut rng = Rng::new(3);
        let v: Vec<f64> = (0..7).map(|_| rng.uniform_in(-4.0, 4.0)).collect();
        let s = softmax(&v);
        let z: f64 = v.iter().map(|x| x.exp()).sum();
        for (si, vi) in s.iter().zip(&v) {
            assert_abs_diff_eq!(*si, vi.exp() / z, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(s.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cholesky_examples() {
        let f = cholesky_psd(&Matrix::identity(3), 0.0).unwrap();
        assert_eq!(f.lower, Matrix::identity(3));
        assert_eq!(f.jitter, 0.0);
        let m = Matrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 9.0]]).unwrap();
        let f = cholesky_psd(&m, 0.0).unwrap();
        assert_eq!(f.lower, Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap());
        let mut rng = Rng::new(5);
        let a = random_psd(5, &mut rng);
        let f = cholesky_psd(&a, 0.0).unwrap();
        assert!(f.lower.matmul_t(&f.lower).max_abs_diff(&a) < 1e-8);
    }

    #[test]
    fn cholesky_jitter_ladder_and_errors() {
        // rank-deficient PSD: needs a jitter rung
        let v = [1.0, 2.0, 3.0];
        let mut m = Matrix::zeros(3, 3);
        m.add_outer(1.0, &v, &v);
        let f = cholesky_psd(&m, 0.0).unwrap();
        assert!(f.jitter >= MIN_JITTER && f.jitter <= MAX_JITTER);
        let mut target = m.clone();
        target.add_scaled(f.jitter, &Matrix::identity(3));
        assert!(f.lower.matmul_t(&f.lower).max_abs_diff(&target) < 1e-8);

        let neg = Matrix::diag(&[1.0, -1.0]);
        assert!(matches!(cholesky_psd(&neg, 0.0), Err(Error::Singular { .. })));
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(cholesky_psd(&rect, 0.0), Err(Error::Contract(_))));
        let asym = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky_psd(&asym, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn cholesky_reconstruction_many() {
        let mut rng = Rng::new(99);
        for trial in 0..1000 {
            let n = 1 + trial % 16;
            let a = random_psd(n, &mut rng);
            let f = cholesky_psd(&a, 0.0).unwrap();
            let mut target = a.clone();
            target.add_scaled(f.jitter, &Matrix::identity(n));
            let err = f.lower.matmul_t(&f.lower).max_abs_diff(&target);
            assert!(err < 1e-8, "n={n} err={err}");
        }
    }

    #[test]
    fn mvn_examples() {
        let mut rng = Rng::new(1);
        let mean = [1.0, -2.0];
        let x = sample_mvn(&mean, &Matrix::zeros(2, 2), &mut rng).unwrap();
        assert_eq!(&x[..], &mean[..]);

        let a = sample_mvn(&mean, &Matrix::identity(2), &mut Rng::new(42)).unwrap();
        let b = sample_mvn(&mean, &Matrix::identity(2), &mut Rng::new(42)).unwrap();
        assert_eq!(a, b);

        assert!(sample_mvn(&mean, &Matrix::identity(3), &mut rng).is_err());
    }

    #[test]
    fn mvn_moments() {
        // mean within ±0.02 per coordinate for 1e5 standard draws: the CLT
        // bound is 3/sqrt(1e5) ≈ 0.0095.
        let s = MvnSampler::new(&[0.0; 3], &Matrix::identity(3)).unwrap();
        let mut rng = Rng::new(2024);
        let n = 100_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let x = s.sample(&mut rng);
            for k in 0..3 {
                sum[k] += x[k];
            }
        }
        for k in 0..3 {
            assert!((sum[k] / n as f64).abs() < 0.02);
        }

        // covariance recovered within 3 standard errors
        let cov = Matrix::from_rows(&[vec![2.0, 0.6], vec![0.6, 0.5]]).unwrap();
        let mean = [1.0, -1.0];
        let s = MvnSampler::new(&mean, &cov).unwrap();
        let mut acc = Matrix::zeros(2, 2);
        let mut m = [0.0; 2];
        let draws: Vec<Vector> = (0..n).map(|_| s.sample(&mut rng)).collect();
        for x in &draws {
            m[0] += x[0] / n as f64;
            m[1] += x[1] / n as f64;
        }
        for x in &draws {
            let d = [x[0] - m[0], x[1] - m[1]];
            acc.add_outer(1.0 / n as f64, &d, &d);
        }
        for i in 0..2 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((m[i] - mean[i]).abs() < 3.0 * se);
            for j in 0..2 {
                // var of a product estimator: (s_ii s_jj + s_ij^2)/n
                let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((acc[(i, j)] - cov[(i, j)]).abs() < 3.0 * se, "{i}{j}");
            }
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[3.0, 1.0]), 0.0);
        assert_abs_diff_eq!(cosine(&[1.0, 1.0], &[-2.0, -2.0]), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn psd_repair_clamps_negative_spectrum() {
        let mut m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(m.min_eigenvalue() < 0.0);
        m.psd_repair();
        assert!(m.min_eigenvalue() > -1e-12);
        let mut rng = Rng::new(8);
        let a = random_psd(4, &mut rng);
        let mut b = a.clone();
        b.psd_repair();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn lse_bounds(v in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let l = log_sum_exp(&v);
            prop_assert!(l >= m - 1e-12);
            prop_assert!(l <= m + (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(
            v in proptest::collection::vec(-20.0f64..20.0, 1..12),
            c in -100.0f64..100.0,
        ) {
            let a = softmax(&v);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(max_abs_diff(&a, &b) < 1e-12);
        }

        #[test]
        fn mvn_deterministic(seed in any::<u64>()) {
            let cov = Matrix::from_rows(&[vec![1.0, 0.3], vec![0.3, 2.0]]).unwrap();
            let a = sample_mvn(&[0.5, 0.5], &cov, &mut Rng::new(seed)).unwrap();
            let b = sample_mvn(&[0.5, 0.5], &cov, &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
            prop_assert_eq!(a[1].to_bits(), b[1].to_bits());
        }
    }
}
