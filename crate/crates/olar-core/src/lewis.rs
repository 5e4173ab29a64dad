//! ℓp Lewis weights via fixed-point iteration, leverage scores for p = 2,
//! and the brute-force exact online weights used as a test oracle and as the
//! naive path of the streaming pipelines.
//!
//! For a matrix A with rows aᵢ and p ∈ [1, 2], the Lewis weights are the
//! unique fixed point of
//!
//! ```text
//! wᵢ = (aᵢᵀ (Aᵀ W^{1−2/p} A)† aᵢ)^{p/2}
//! ```
//!
//! iterated from W = I. The map is a contraction for p < 2, so any positive
//! starting point reaches the same fixed point; `lewis_weights_warm` exploits
//! that for repeated queries on slowly-changing matrices.

use crate::linalg::{self, DenseMatrix, LinalgError};
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Weights below this are compared by absolute change when testing
/// convergence; relative change would stall on weights collapsing to zero.
const TINY_WEIGHT: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LewisError {
    #[error("fixed-point iteration did not converge in {0} iterations")]
    NotConverged(LewisWeights),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl LewisError {
    /// Accepts a constant-factor iterate instead of failing; streaming
    /// callers only need constant-factor weights.
    pub fn into_weights(self) -> Result<LewisWeights, LinalgError> {
        match self {
            LewisError::NotConverged(w) => Ok(w),
            LewisError::Linalg(e) => Err(e),
        }
    }
}

impl std::fmt::Display for LewisWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LewisWeights(p={}, n={}, converged={})", self.p, self.weights.len(), self.converged)
    }
}

/// Per-row ℓp Lewis weights together with iteration metadata.
#[derive(Debug, Clone)]
pub struct LewisWeights {
    pub p: f64,
    pub weights: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl LewisWeights {
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

fn is_zero_row(row: &[f64]) -> bool {
    row.iter().all(|&v| v == 0.0)
}

/// One application of the fixed-point map to a weight vector.
///
/// Zero rows keep weight exactly zero and are excluded from the weighted
/// Gram, where `w^{1−2/p}` would be undefined at w = 0 for p < 2.
pub fn lewis_iteration_step(
    a: &DenseMatrix,
    p: f64,
    weights: &[f64],
) -> Result<Vec<f64>, LinalgError> {
    let d = a.cols();
    let exponent = 1.0 - 2.0 / p;
    let mut g = DenseMatrix::zeros(d, d);
    for i in 0..a.rows() {
        let row = a.row(i);
        if is_zero_row(row) {
            continue;
        }
        let w = if exponent == 0.0 { 1.0 } else { weights[i].max(TINY_WEIGHT).powf(exponent) };
        linalg::accumulate_outer(&mut g, row, w);
    }
    linalg::symmetrize(&mut g);
    let ginv = linalg::pseudo_inverse(&g, linalg::DEFAULT_PINV_REL_TOL)?;
    let mut out = vec![0.0; a.rows()];
    for i in 0..a.rows() {
        let row = a.row(i);
        if is_zero_row(row) {
            continue;
        }
        let qf = ginv.quadratic_form(row)?;
        out[i] = qf.powf(p / 2.0);
    }
    Ok(out)
}

fn run_iteration(
    a: &DenseMatrix,
    p: f64,
    tol: f64,
    max_iter: usize,
    init: Vec<f64>,
) -> Result<LewisWeights, LewisError> {
    assert!((1.0..=2.0).contains(&p), "p must lie in [1, 2]");
    assert!(a.rows() >= 1, "matrix must have at least one row");
    let mut weights = init;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let next = lewis_iteration_step(a, p, &weights)?;
        iterations += 1;
        let mut delta = 0.0_f64;
        for (old, new) in weights.iter().zip(&next) {
            let change = (new - old).abs();
            let measure = if *old > TINY_WEIGHT { change / old } else { change };
            delta = delta.max(measure);
        }
        weights = next;
        if delta < tol {
            converged = true;
            break;
        }
        // p = 2 needs no second pass: the map does not depend on the weights.
        if p == 2.0 {
            converged = true;
            break;
        }
    }
    let result = LewisWeights { p, weights, converged, iterations };
    if converged {
        Ok(result)
    } else {
        Err(LewisError::NotConverged(result))
    }
}

/// ℓp Lewis weights of `a`, iterated from W = I.
pub fn lewis_weights(
    a: &DenseMatrix,
    p: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LewisWeights, LewisError> {
    run_iteration(a, p, tol, max_iter, vec![1.0; a.rows()])
}

/// Same fixed point, started from a caller-provided positive weight vector.
/// Entries for rows beyond `init.len()` start at 1.
pub fn lewis_weights_warm(
    a: &DenseMatrix,
    p: f64,
    tol: f64,
    max_iter: usize,
    init: &[f64],
) -> Result<LewisWeights, LewisError> {
    let mut w = vec![1.0; a.rows()];
    for (dst, src) in w.iter_mut().zip(init) {
        *dst = src.max(TINY_WEIGHT).min(1.0);
    }
    run_iteration(a, p, tol, max_iter, w)
}

/// ℓ2 leverage scores `aᵢᵀ (AᵀA)† aᵢ`, clamped to [0, 1]. No iteration.
pub fn leverage_scores(a: &DenseMatrix) -> Result<LewisWeights, LinalgError> {
    let g = linalg::gram(a)?;
    let ginv = linalg::pseudo_inverse(&g, linalg::DEFAULT_PINV_REL_TOL)?;
    let mut weights = vec![0.0; a.rows()];
    for i in 0..a.rows() {
        let row = a.row(i);
        if is_zero_row(row) {
            continue;
        }
        weights[i] = ginv.quadratic_form(row)?.min(1.0);
    }
    Ok(LewisWeights { p: 2.0, weights, converged: true, iterations: 1 })
}

/// Exact online Lewis weights: `wᵢ = w_last(A⁽ⁱ⁾)` recomputed per prefix.
///
/// O(n) full fixed-point solves; this is the oracle / naive path only.
/// For p = 2 the prefix Gram is maintained incrementally, which evaluates the
/// same leverage formula without re-scanning the prefix.
pub fn online_lewis_weights_exact(
    a: &DenseMatrix,
    p: f64,
    tol: f64,
) -> Result<Vec<f64>, LewisError> {
    let n = a.rows();
    let d = a.cols();
    let mut out = Vec::with_capacity(n);
    if p == 2.0 {
        let mut g = DenseMatrix::zeros(d, d);
        for i in 0..n {
            let row = a.row(i);
            linalg::accumulate_outer(&mut g, row, 1.0);
            linalg::symmetrize(&mut g);
            if is_zero_row(row) {
                out.push(0.0);
                continue;
            }
            let ginv = linalg::pseudo_inverse(&g, linalg::DEFAULT_PINV_REL_TOL)
                .map_err(LewisError::Linalg)?;
            out.push(ginv.quadratic_form(row)?.min(1.0));
        }
        return Ok(out);
    }
    let mut prefix = DenseMatrix::with_cols(d);
    for i in 0..n {
        prefix.push_row(a.row(i)).map_err(LewisError::Linalg)?;
        let lw = lewis_weights(&prefix, p, tol, DEFAULT_MAX_ITER)?;
        out.push(lw.weights[i]);
    }
    Ok(out)
}
