//! Minimal dense linear algebra and optimization primitives.
//!
//! Everything here is deterministic: random draws are parameterized by an
//! explicit [`RngSeed`] and the same seed always reproduces the same values
//! bit for bit. Matrices are dense, row-major, `f64` throughout.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("invalid dimensions: {rows}x{cols}")]
    InvalidDimensions { rows: usize, cols: usize },
    #[error("data length {got} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("matrix is rank deficient (pivot {pivot:.3e} at column {col})")]
    RankDeficient { col: usize, pivot: f64 },
    #[error("matrix is not symmetric (max asymmetry {max_asym:.3e})")]
    NotSymmetric { max_asym: f64 },
    #[error("non-finite value produced in {op}")]
    NonFinite { op: &'static str },
}

/// Seed for a deterministic random stream.
///
/// Identical seed and identical call sequence give a bit-identical stream.
/// `child` derives statistically independent sub-seeds so that separate
/// consumers (per-graph identifiers, dropout masks, ...) never share a
/// stream position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derive a sub-seed. Uses splitmix64 finalization so nearby salts give
    /// unrelated streams.
    pub fn child(self, salt: u64) -> RngSeed {
        let mut z = self.0 ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        RngSeed(z ^ (z >> 31))
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Matrix, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(NumericsError::DataLength {
                    rows: r,
                    cols: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.rows {
            return Err(NumericsError::ShapeMismatch {
                expected: (self.cols, other.cols),
                got: (other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(
            &mut out.data,
            &self.data,
            &other.data,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_transpose(&self, other: &Matrix) -> Result<Matrix, NumericsError> {
        if self.cols != other.cols {
            return Err(NumericsError::ShapeMismatch {
                expected: (other.rows, self.cols),
                got: (other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        matmul_nt_into(
            &mut out.data,
            &self.data,
            &other.data,
            self.rows,
            self.cols,
            other.rows,
        );
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<(), NumericsError> {
        if self.shape() != other.shape() {
            return Err(NumericsError::ShapeMismatch {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `‖self^T self − I‖∞`, the departure of the columns from orthonormality.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = self.transpose().matmul(self).expect("shape");
        let mut worst = 0.0f64;
        for i in 0..gram.rows {
            for j in 0..gram.cols {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.get(i, j) - target).abs());
            }
        }
        worst
    }
}

/// `out += a * b` for row-major `a: m x k`, `b: k x n`. The i-k-j loop order
/// keeps the inner loop contiguous in both `b` and `out`.
pub(crate) fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a * b^T` for row-major `a: m x k`, `b: n x k`.
pub(crate) fn matmul_nt_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out += a^T * b` for row-major `a: k x m`, `b: k x n`.
pub(crate) fn matmul_tn_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Matrix of i.i.d. standard normal entries, deterministic under `seed`.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: RngSeed) -> Result<Matrix, NumericsError> {
    if rows == 0 || cols == 0 {
        return Err(NumericsError::InvalidDimensions { rows, cols });
    }
    let mut rng = seed.rng();
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Matrix { rows, cols, data })
}

/// Orthonormalize a square full-rank matrix via Householder QR, returning `Q`
/// with `Q^T Q = I` to within 1e-10 in max-abs.
pub fn qr_orthonormal(m: &Matrix) -> Result<Matrix, NumericsError> {
    if m.rows != m.cols || m.rows == 0 {
        return Err(NumericsError::InvalidDimensions {
            rows: m.rows,
            cols: m.cols,
        });
    }
    let n = m.rows;
    let mut r = m.clone();
    // Householder vectors, one per column, stored densely.
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let scale = m.max_abs().max(1.0);
    for j in 0..n {
        let mut v = vec![0.0; n];
        let mut norm2 = 0.0;
        for i in j..n {
            let x = r.get(i, j);
            v[i] = x;
            norm2 += x * x;
        }
        let norm = norm2.sqrt();
        if norm <= 1e-13 * scale {
            return Err(NumericsError::RankDeficient { col: j, pivot: norm });
        }
        let alpha = if v[j] >= 0.0 { -norm } else { norm };
        v[j] -= alpha;
        let vnorm2: f64 = v[j..].iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            // Apply I - 2 v v^T / (v^T v) to the trailing block of R.
            for col in j..n {
                let mut dot = 0.0;
                for i in j..n {
                    dot += v[i] * r.get(i, col);
                }
                let f = 2.0 * dot / vnorm2;
                for i in j..n {
                    let val = r.get(i, col) - f * v[i];
                    r.set(i, col, val);
                }
            }
        }
        if r.get(j, j).abs() <= 1e-12 * scale {
            return Err(NumericsError::RankDeficient {
                col: j,
                pivot: r.get(j, j).abs(),
            });
        }
        vs.push(v);
    }
    // Accumulate Q = H_0 H_1 ... H_{n-1} by applying reflectors to I in reverse.
    let mut q = Matrix::identity(n);
    for j in (0..n).rev() {
        let v = &vs[j];
        let vnorm2: f64 = v[j..].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for col in 0..n {
            let mut dot = 0.0;
            for i in j..n {
                dot += v[i] * q.get(i, col);
            }
            let f = 2.0 * dot / vnorm2;
            for i in j..n {
                let val = q.get(i, col) - f * v[i];
                q.set(i, col, val);
            }
        }
    }
    Ok(q)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as columns. Each eigenvector is canonicalized so its first
/// component of non-negligible magnitude is positive. Input must be
/// symmetric to within 1e-12.
pub fn sym_eig(s: &Matrix) -> Result<(Vec<f64>, Matrix), NumericsError> {
    if s.rows != s.cols || s.rows == 0 {
        return Err(NumericsError::InvalidDimensions {
            rows: s.rows,
            cols: s.cols,
        });
    }
    let n = s.rows;
    let mut max_asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((s.get(i, j) - s.get(j, i)).abs());
        }
    }
    if max_asym > 1e-12 {
        return Err(NumericsError::NotSymmetric { max_asym });
    }

    let mut a = s.clone();
    let mut v = Matrix::identity(n);
    const MAX_SWEEPS: usize = 100;
    const OFF_TOL: f64 = 1e-12;
    for _ in 0..MAX_SWEEPS {
        let mut off2 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off2 += 2.0 * a.get(i, j) * a.get(i, j);
            }
        }
        if off2.sqrt() < OFF_TOL {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() < OFF_TOL / (n as f64 * n as f64) {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                // Rotate rows/columns p,q of A.
                for i in 0..n {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, c * aip - sn * aiq);
                    a.set(i, q, sn * aip + c * aiq);
                }
                for j in 0..n {
                    let apj = a.get(p, j);
                    let aqj = a.get(q, j);
                    a.set(p, j, c * apj - sn * aqj);
                    a.set(q, j, sn * apj + c * aqj);
                }
                // Accumulate eigenvectors.
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - sn * viq);
                    v.set(i, q, sn * vip + c * viq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).partial_cmp(&a.get(j, j)).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| v.get(i, old_col)).collect();
        let flip = column_sign(&col);
        for i in 0..n {
            vectors.set(i, new_col, flip * col[i]);
        }
    }
    Ok((eigenvalues, vectors))
}

// Sign that makes the first non-negligible component positive. Unit-norm
// columns always have a component of magnitude >= 1/sqrt(n), so 1e-8 cleanly
// separates true zeros from rounding residue.
fn column_sign(col: &[f64]) -> f64 {
    for &x in col {
        if x.abs() > 1e-8 {
            return if x > 0.0 { 1.0 } else { -1.0 };
        }
    }
    1.0
}

/// Row-wise softmax with row-max subtraction for stability. Every row of the
/// result is non-negative and sums to 1 within 1e-12.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..m.rows {
        softmax_row_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter-tensor AdamW state: first/second moment accumulators and a
/// strictly increasing step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub cfg: AdamWConfig,
}

impl AdamWState {
    pub fn new(param_len: usize, cfg: AdamWConfig) -> AdamWState {
        AdamWState {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            step: 0,
            cfg,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update. `lr_scale` multiplies the base
    /// learning rate (for warmup/decay schedules).
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr_scale: f64,
    ) -> Result<(), NumericsError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: (self.m.len(), 1),
                got: (params.len().max(grads.len()), 1),
            });
        }
        self.step += 1;
        let t = self.step as f64;
        let cfg = self.cfg;
        let lr = cfg.lr * lr_scale;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
        }
        Ok(())
    }
}
