//! Dense row-major matrices, the handful of kernels the engine needs, and the
//! least-squares solver shared by the explainers and the fidelity regularizer.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Diagonal jitter used when a normal-equations system is not numerically
/// positive definite.
pub const RIDGE_JITTER: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            Contract,
            "buffer of length {} cannot be viewed as {}x{}",
            data.len(),
            rows,
            cols
        );
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            ensure!(
                r.len() == cols,
                Contract,
                "row {} has length {}, expected {}",
                i,
                r.len(),
                cols
            );
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero width
        let width = self.cols.max(1);
        self.data.chunks_exact(width).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        debug_assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack rows of several equally wide matrices.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, Matrix::cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            ensure!(p.cols == cols, Contract, "vstack width mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators so the loop vectorizes without fast-math
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = A · B` for a row-major `k × n` matrix `b`, with `A[i][k]` read through
/// `a_at`. Two output rows and eight columns are accumulated in registers; each
/// entry is still summed in increasing `k`, so results do not depend on the
/// blocking.
#[inline(always)]
fn gemm(m: usize, n: usize, kdim: usize, a_at: impl Fn(usize, usize) -> f64, b: &[f64]) -> Vec<f64> {
    const W: usize = 8;
    let mut out = vec![0.0; m * n];
    let full = n / W * W;
    let mut i = 0;
    while i < m {
        let pair = i + 1 < m;
        let mut j0 = 0;
        while j0 < full {
            let mut acc0 = [0.0f64; W];
            let mut acc1 = [0.0f64; W];
            for k in 0..kdim {
                let bk: &[f64; W] = b[k * n + j0..k * n + j0 + W].try_into().unwrap();
                let a0 = a_at(i, k);
                for t in 0..W {
                    acc0[t] += a0 * bk[t];
                }
                if pair {
                    let a1 = a_at(i + 1, k);
                    for t in 0..W {
                        acc1[t] += a1 * bk[t];
                    }
                }
            }
            out[i * n + j0..i * n + j0 + W].copy_from_slice(&acc0);
            if pair {
                out[(i + 1) * n + j0..(i + 1) * n + j0 + W].copy_from_slice(&acc1);
            }
            j0 += W;
        }
        for r in i..(i + 2).min(m) {
            for j in full..n {
                let mut acc = 0.0;
                for k in 0..kdim {
                    acc += a_at(r, k) * b[k * n + j];
                }
                out[r * n + j] = acc;
            }
        }
        i += 2;
    }
    out
}

/// `a · b`
pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    let k = a.cols;
    let data = gemm(a.rows, b.cols, k, |i, p| a.data[i * k + p], &b.data);
    Matrix {
        rows: a.rows,
        cols: b.cols,
        data,
    }
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension mismatch");
    matmul(a, &b.transpose())
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimension mismatch");
    let ac = a.cols;
    let data = gemm(a.cols, b.cols, a.rows, |j, p| a.data[p * ac + j], &b.data);
    Matrix {
        rows: a.cols,
        cols: b.cols,
        data,
    }
}

/// In-place Cholesky factorization of a symmetric matrix. Returns `None`
/// when a pivot is not safely positive.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows;
    debug_assert_eq!(n, a.cols);
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let threshold = scale * 1e-13;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag.is_nan() || diag <= threshold || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

fn cholesky_substitute(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[(i, k)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[(k, i)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    y
}

/// Solve a symmetric positive semi-definite system. If the plain factorization
/// fails, [`RIDGE_JITTER`] is added to the diagonal (and grown tenfold a few
/// times if that is still not enough).
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    ensure!(
        a.rows == a.cols && a.rows == b.len(),
        Contract,
        "solve_spd shape mismatch"
    );
    if a.rows == 0 {
        return Ok(Vec::new());
    }
    if let Some(l) = cholesky(a) {
        return Ok(cholesky_substitute(&l, b));
    }
    let mut jitter = RIDGE_JITTER;
    for _ in 0..6 {
        let mut shifted = a.clone();
        for i in 0..a.rows {
            shifted[(i, i)] += jitter;
        }
        if let Some(l) = cholesky(&shifted) {
            return Ok(cholesky_substitute(&l, b));
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(
        "normal equations remain singular after ridge jitter".into(),
    ))
}

/// An affine function `coefficientsᵀx + intercept`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

impl AffineFit {
    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.coefficients, x) + self.intercept
    }
}

/// Least squares of `targets` on the intercept-augmented `samples`,
/// minimizing `(1/m) Σ (yⱼ − βᵀx'ⱼ − b)² + ridge · ‖β‖²` (the intercept is not
/// penalized).
///
/// The system is solved in coordinates centered on the sample means, which is
/// algebraically the same fit and much better conditioned for the small
/// neighborhoods used here.
pub fn fit_affine(samples: &Matrix, targets: &[f64], ridge: f64) -> Result<AffineFit> {
    let m = samples.rows();
    let d = samples.cols();
    ensure!(targets.len() == m, Contract, "one target per sample required");
    ensure!(m >= 1, Contract, "least squares needs at least one sample");
    ensure!(ridge >= 0.0, Contract, "ridge must be non-negative");

    let inv_m = 1.0 / m as f64;
    let mut x_mean = vec![0.0; d];
    for row in samples.iter_rows() {
        axpy(inv_m, row, &mut x_mean);
    }
    let y_mean = targets.iter().sum::<f64>() * inv_m;

    let mut gram = Matrix::zeros(d, d);
    let mut rhs = vec![0.0; d];
    let mut centered = vec![0.0; d];
    for (row, &y) in samples.iter_rows().zip(targets) {
        for k in 0..d {
            centered[k] = row[k] - x_mean[k];
        }
        let yc = y - y_mean;
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            rhs[a] += ca * yc;
            for b in a..d {
                gram[(a, b)] += ca * centered[b];
            }
        }
    }
    for a in 0..d {
        rhs[a] *= inv_m;
        for b in a..d {
            gram[(a, b)] *= inv_m;
            gram[(b, a)] = gram[(a, b)];
        }
        gram[(a, a)] += ridge;
    }
    let coefficients = solve_spd(&gram, &rhs)?;
    let intercept = y_mean - dot(&coefficients, &x_mean);
    Ok(AffineFit {
        coefficients,
        intercept,
    })
}

/// Simple linear regression of `targets` on one scalar input. Returns `None`
/// when the input has zero spread.
pub fn fit_line(inputs: &[f64], targets: &[f64]) -> Option<(f64, f64)> {
    let m = inputs.len() as f64;
    let x_mean = inputs.iter().sum::<f64>() / m;
    let y_mean = targets.iter().sum::<f64>() / m;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in inputs.iter().zip(targets) {
        let dx = x - x_mean;
        sxx += dx * dx;
        sxy += dx * (y - y_mean);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some((slope, y_mean - slope * x_mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.5, 1.0], vec![2.0, -1.0], vec![1.0, 1.0]]).unwrap();
        let ab = matmul(&a, &b);
        assert_eq!(ab.as_slice(), &[7.5, 2.0, 2.5, 0.5]);
        assert_eq!(matmul_nt(&a, &b.transpose()), ab);
        assert_eq!(matmul_tn(&a.transpose(), &b), ab);
    }

    #[test]
    fn zero_system_falls_back_to_jitter() {
        let a = Matrix::zeros(3, 3);
        let x = solve_spd(&a, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(x, vec![0.0; 3]);
    }

    #[test]
    fn affine_fit_recovers_plane() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 1.3).cos()])
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y: Vec<f64> = rows.iter().map(|r| 2.0 * r[0] - 3.0 * r[1] + 0.5).collect();
        let fit = fit_affine(&x, &y, 0.0).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((fit.coefficients[1] + 3.0).abs() < 1e-12);
        assert!((fit.intercept - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_samples_give_flat_fit() {
        let x = Matrix::filled(5, 3, 0.7);
        let fit = fit_affine(&x, &[2.0; 5], 0.0).unwrap();
        assert!(fit.coefficients.iter().all(|c| c.abs() < 1e-12));
        assert!((fit.eval(&[0.7, 0.7, 0.7]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn line_fit_degenerate_is_none() {
        assert!(fit_line(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).is_none());
        let (s, b) = fit_line(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((s - 2.0).abs() < 1e-15 && (b - 1.0).abs() < 1e-15);
    }
}
