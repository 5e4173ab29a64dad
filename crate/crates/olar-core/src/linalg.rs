//! Dense linear-algebra kernels shared by every other module: Gram matrices,
//! symmetric pseudo-inverse, least squares and rank-one inverse updates.
//!
//! Matrices are row-major and growable by rows, which matches the streaming
//! access pattern everywhere else in the crate. All entries are checked finite
//! at the construction boundary; no NaN/Inf is admitted into any kernel.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite entry at position {index}")]
    NonFinite { index: usize },
    #[error("matrix must be nonempty")]
    Empty,
    #[error("numeric breakdown in rank-one update (1+g = {denom:.3e})")]
    NumericBreakdown { denom: f64 },
}

/// Row-major dense matrix of `f64`. Rows can be appended in O(d).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// An empty matrix with a fixed column count, ready for `push_row`.
    pub fn with_cols(cols: usize) -> Self {
        Self { rows: 0, cols, data: Vec::new() }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch { expected: rows * cols, got: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index: i });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(cols: usize, rows: &[&[f64]]) -> Result<Self, LinalgError> {
        let mut m = Self::with_cols(cols);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<(), LinalgError> {
        if row.len() != self.cols {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, got: row.len() });
        }
        if let Some(i) = row.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index: i });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Appends `row` scaled by `scale` without allocating an intermediate.
    pub fn push_scaled_row(&mut self, row: &[f64], scale: f64) -> Result<(), LinalgError> {
        if row.len() != self.cols {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, got: row.len() });
        }
        if !scale.is_finite() {
            return Err(LinalgError::NonFinite { index: 0 });
        }
        for (i, v) in row.iter().enumerate() {
            let s = v * scale;
            if !s.is_finite() {
                self.data.truncate(self.rows * self.cols);
                return Err(LinalgError::NonFinite { index: i });
            }
            self.data.push(s);
        }
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn matvec(&self, v: &DenseVector) -> Result<DenseVector, LinalgError> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, got: v.len() });
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            out[i] = dot(self.row(i), v.as_slice());
        }
        Ok(DenseVector::from_vec_unchecked(out))
    }

    /// Computes `Aᵀ v` for a vector with one entry per row.
    pub fn transpose_matvec(&self, v: &DenseVector) -> Result<DenseVector, LinalgError> {
        if v.len() != self.rows {
            return Err(LinalgError::DimensionMismatch { expected: self.rows, got: v.len() });
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let vi = v.as_slice()[i];
            if vi != 0.0 {
                for (j, a) in self.row(i).iter().enumerate() {
                    out[j] += a * vi;
                }
            }
        }
        Ok(DenseVector::from_vec_unchecked(out))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Vertical concatenation `self ∘ other`.
    pub fn vcat(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if other.cols != self.cols {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, got: other.cols });
        }
        let mut data = Vec::with_capacity((self.rows + other.rows) * self.cols);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(DenseMatrix { rows: self.rows + other.rows, cols: self.cols, data })
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, got: other.rows });
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik != 0.0 {
                    for j in 0..other.cols {
                        out.data[i * other.cols + j] += aik * other.get(k, j);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Dense vector of finite `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self, LinalgError> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index: i });
        }
        Ok(Self(data))
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn push(&mut self, v: f64) -> Result<(), LinalgError> {
        if !v.is_finite() {
            return Err(LinalgError::NonFinite { index: self.0.len() });
        }
        self.0.push(v);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn norm2(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_p(&self, p: f64) -> f64 {
        if p == 2.0 {
            return self.norm2();
        }
        if p == 1.0 {
            return self.0.iter().map(|v| v.abs()).sum();
        }
        self.0.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }

    pub fn inf_norm(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn add(&self, other: &DenseVector) -> Result<DenseVector, LinalgError> {
        if self.len() != other.len() {
            return Err(LinalgError::DimensionMismatch { expected: self.len(), got: other.len() });
        }
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn sub(&self, other: &DenseVector) -> Result<DenseVector, LinalgError> {
        if self.len() != other.len() {
            return Err(LinalgError::DimensionMismatch { expected: self.len(), got: other.len() });
        }
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maintained inverse of a symmetric PSD matrix.
///
/// Produced by [`pseudo_inverse`] and kept current through
/// [`SymmetricInverse::rank_one_update`]; symmetry is re-imposed after every
/// update so drift cannot accumulate.
#[derive(Debug, Clone)]
pub struct SymmetricInverse {
    dim: usize,
    data: Vec<f64>,
}

impl SymmetricInverse {
    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_matrix(&self) -> DenseMatrix {
        DenseMatrix { rows: self.dim, cols: self.dim, data: self.data.clone() }
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            out[i] = dot(&self.data[i * self.dim..(i + 1) * self.dim], v);
        }
        Ok(out)
    }

    /// Quadratic form `vᵀ G⁻¹ v`, clamped at zero against roundoff.
    pub fn quadratic_form(&self, v: &[f64]) -> Result<f64, LinalgError> {
        let gv = self.matvec(v)?;
        Ok(dot(v, &gv).max(0.0))
    }

    /// Sherman–Morrison update: replaces `G⁻¹` with `(G + a aᵀ / p)⁻¹`.
    ///
    /// Fails with `NumericBreakdown` when `1 + aᵀG⁻¹a/p` falls below 1e-14,
    /// in which case the caller must rebuild the inverse from its Gram.
    pub fn rank_one_update(&mut self, a: &[f64], p: f64) -> Result<(), LinalgError> {
        if a.len() != self.dim {
            return Err(LinalgError::DimensionMismatch { expected: self.dim, got: a.len() });
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(LinalgError::NonFinite { index: 0 });
        }
        let ga = self.matvec(a)?;
        let g = dot(a, &ga) / p;
        let denom = 1.0 + g;
        if denom <= 1e-14 {
            return Err(LinalgError::NumericBreakdown { denom });
        }
        let coef = 1.0 / (denom * p);
        for i in 0..self.dim {
            for j in i..self.dim {
                let delta = coef * ga[i] * ga[j];
                self.data[i * self.dim + j] -= delta;
                if i != j {
                    self.data[j * self.dim + i] = self.data[i * self.dim + j];
                }
            }
        }
        Ok(())
    }
}

/// `Mᵀ M`, the (not yet inverted) Gram matrix of `M`.
pub fn gram(m: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if m.is_empty() {
        return Err(LinalgError::Empty);
    }
    let d = m.cols();
    let mut g = DenseMatrix::zeros(d, d);
    for r in 0..m.rows() {
        accumulate_outer(&mut g, m.row(r), 1.0);
    }
    symmetrize(&mut g);
    Ok(g)
}

/// Adds `w · row rowᵀ` into `g` (upper triangle; callers symmetrize at the end).
pub(crate) fn accumulate_outer(g: &mut DenseMatrix, row: &[f64], w: f64) {
    let d = row.len();
    for i in 0..d {
        let wi = w * row[i];
        if wi != 0.0 {
            for j in i..d {
                g.data[i * d + j] += wi * row[j];
            }
        }
    }
}

pub(crate) fn symmetrize(g: &mut DenseMatrix) {
    let d = g.cols();
    for i in 0..d {
        for j in 0..i {
            g.data[i * d + j] = g.data[j * d + i];
        }
    }
}

/// Default relative eigenvalue cutoff for the pseudo-inverse.
pub const DEFAULT_PINV_REL_TOL: f64 = 1e-10;

/// Moore–Penrose inverse of a symmetric PSD matrix via symmetric
/// eigendecomposition. Eigenvalues below `rel_tol · λ_max` are treated as
/// zero; the all-zero matrix maps to the all-zero matrix.
pub fn pseudo_inverse(g: &DenseMatrix, rel_tol: f64) -> Result<SymmetricInverse, LinalgError> {
    if g.rows() != g.cols() {
        return Err(LinalgError::DimensionMismatch { expected: g.rows(), got: g.cols() });
    }
    let d = g.rows();
    if d == 0 {
        return Err(LinalgError::Empty);
    }
    let na = nalgebra::DMatrix::from_row_slice(d, d, g.as_slice());
    let eig = na.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    let cutoff = rel_tol * lambda_max;
    let mut data = vec![0.0; d * d];
    if lambda_max > 0.0 {
        for k in 0..d {
            let lam = eig.eigenvalues[k];
            if lam > cutoff {
                let inv = 1.0 / lam;
                let col = eig.eigenvectors.column(k);
                for i in 0..d {
                    let ci = col[i] * inv;
                    for j in i..d {
                        data[i * d + j] += ci * col[j];
                    }
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                data[i * d + j] = data[j * d + i];
            }
        }
    }
    Ok(SymmetricInverse { dim: d, data })
}

/// Rank of a symmetric PSD matrix: eigenvalues above `rel_tol · λ_max`.
pub fn psd_rank(g: &DenseMatrix, rel_tol: f64) -> Result<usize, LinalgError> {
    if g.rows() != g.cols() || g.rows() == 0 {
        return Err(LinalgError::Empty);
    }
    let d = g.rows();
    let na = nalgebra::DMatrix::from_row_slice(d, d, g.as_slice());
    let eig = na.symmetric_eigenvalues();
    let lambda_max = eig.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    if lambda_max == 0.0 {
        return Ok(0);
    }
    Ok(eig.iter().filter(|&&v| v > rel_tol * lambda_max).count())
}

/// Least-squares solve `min ‖Ax − b‖₂` through the normal equations.
/// Rank-deficient systems fall back to the pseudo-inverse, yielding the
/// minimum-norm solution.
pub fn least_squares(a: &DenseMatrix, b: &DenseVector) -> Result<DenseVector, LinalgError> {
    if a.rows() != b.len() {
        return Err(LinalgError::DimensionMismatch { expected: a.rows(), got: b.len() });
    }
    if a.is_empty() {
        return Err(LinalgError::Empty);
    }
    let g = gram(a)?;
    let ginv = pseudo_inverse(&g, DEFAULT_PINV_REL_TOL)?;
    let atb = a.transpose_matvec(b)?;
    Ok(DenseVector::from_vec_unchecked(ginv.matvec(atb.as_slice())?))
}

/// Functional form of the Sherman–Morrison step for callers that keep the
/// previous inverse.
pub fn rank_one_inverse_update(
    ginv: &SymmetricInverse,
    a: &DenseVector,
    p: f64,
) -> Result<SymmetricInverse, LinalgError> {
    let mut out = ginv.clone();
    out.rank_one_update(a.as_slice(), p)?;
    Ok(out)
}
