//! Sparse Johnson–Lindenstrauss transform with deterministic per-column
//! generation.
//!
//! Column c is a pure function of (seed, c): s distinct positions in [m] with
//! signs ±1/√s. Appending a column therefore never re-randomizes history,
//! and only the product F = J·Ã is ever stored, never J itself.

use crate::linalg::{DenseMatrix, LinalgError};
use crate::sketch::splitmix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JlError {
    #[error("invalid JL shape: m={m}, s={s}")]
    InvalidShape { m: usize, s: usize },
    #[error("column count mismatch: transform has {have}, caller expected {expected}")]
    Inconsistency { have: usize, expected: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Sparse JL transform of target dimension `m` with `s` nonzeros per column.
#[derive(Debug, Clone)]
pub struct SparseJl {
    m: usize,
    s: usize,
    seed: u64,
    cols: usize,
}

/// Default (m, s) giving a constant-factor JL for a stream of length `n`
/// at failure budget `delta`.
pub fn default_dims(n: u64, delta: f64) -> (usize, usize) {
    let logterm = ((n.max(2) as f64) / delta).ln();
    let m = (16.0 * logterm).ceil() as usize;
    let s = ((2.0 * logterm).ceil() as usize).clamp(1, m);
    (m, s)
}

pub fn jl_new(m: usize, s: usize, seed: u64) -> Result<SparseJl, JlError> {
    if m < 1 || s < 1 || s > m {
        return Err(JlError::InvalidShape { m, s });
    }
    Ok(SparseJl { m, s, seed, cols: 0 })
}

impl SparseJl {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// The sparse column for index `c`: s (position, value) pairs with
    /// values ±1/√s. Pure in (seed, c).
    pub fn column(&self, c: usize) -> Vec<(usize, f64)> {
        let derived = splitmix(splitmix(self.seed ^ 0x4a4c_636f_6c75_6d6e) ^ c as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derived);
        let positions = rand::seq::index::sample(&mut rng, self.m, self.s);
        let inv_sqrt_s = 1.0 / (self.s as f64).sqrt();
        positions
            .iter()
            .map(|pos| {
                let sign = if rng.random::<bool>() { inv_sqrt_s } else { -inv_sqrt_s };
                (pos, sign)
            })
            .collect()
    }

    /// Applies the first `k` columns to a k-vector: `J v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (c, &vc) in v.iter().enumerate() {
            if vc != 0.0 {
                for (pos, val) in self.column(c) {
                    out[pos] += val * vc;
                }
            }
        }
        out
    }

    /// Materializes the first `k` columns as a dense m×k matrix (test oracle).
    pub fn materialize(&self, k: usize) -> DenseMatrix {
        let mut j = DenseMatrix::zeros(self.m, k);
        for c in 0..k {
            for (pos, val) in self.column(c) {
                j.set(pos, c, val);
            }
        }
        j
    }
}

/// Rank-one maintenance of F = J·Ã when sketch row `k` (0-based: the new
/// column index) is appended: F += column(k) · rowᵀ, touching only s of the
/// m rows of F. `expected_rows` is the sketch row count after the append.
pub fn jl_apply_append(
    f: &mut DenseMatrix,
    jl: &mut SparseJl,
    expected_rows: usize,
    row: &[f64],
) -> Result<(), JlError> {
    if expected_rows != jl.cols + 1 {
        return Err(JlError::Inconsistency { have: jl.cols, expected: expected_rows });
    }
    if f.rows() != jl.m || f.cols() != row.len() {
        return Err(JlError::Linalg(LinalgError::DimensionMismatch {
            expected: jl.m,
            got: f.rows(),
        }));
    }
    let d = row.len();
    for (pos, val) in jl.column(jl.cols) {
        for j in 0..d {
            let cur = f.get(pos, j);
            f.set(pos, j, cur + val * row[j]);
        }
    }
    jl.cols += 1;
    Ok(())
}

/// ‖H v‖₂² — the squared norm behind the fast leverage estimates.
pub fn jl_norm_estimate(h: &DenseMatrix, v: &[f64]) -> Result<f64, JlError> {
    if h.cols() != v.len() {
        return Err(JlError::Linalg(LinalgError::DimensionMismatch {
            expected: h.cols(),
            got: v.len(),
        }));
    }
    let mut acc = 0.0;
    for i in 0..h.rows() {
        let hv = crate::linalg::dot(h.row(i), v);
        acc += hv * hv;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_transform_is_empty_and_validated() {
        let jl = jl_new(8, 2, 7).unwrap();
        assert_eq!(jl.cols(), 0);
        assert!(jl_new(4, 5, 0).is_err());
        assert!(jl_new(0, 0, 0).is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        let a = jl_new(16, 4, 123).unwrap();
        let b = jl_new(16, 4, 123).unwrap();
        for c in 0..50 {
            assert_eq!(a.column(c), b.column(c));
        }
        let other = jl_new(16, 4, 124).unwrap();
        assert_ne!(a.column(0), other.column(0));
    }

    #[test]
    fn one_by_one_column_is_single_sign() {
        let jl = jl_new(1, 1, 3).unwrap();
        for c in 0..20 {
            let col = jl.column(c);
            assert_eq!(col.len(), 1);
            assert_eq!(col[0].0, 0);
            assert!((col[0].1.abs() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn columns_have_exactly_s_distinct_positions() {
        let jl = jl_new(32, 6, 9).unwrap();
        for c in 0..100 {
            let col = jl.column(c);
            assert_eq!(col.len(), 6);
            let mut pos: Vec<usize> = col.iter().map(|(p, _)| *p).collect();
            pos.sort_unstable();
            pos.dedup();
            assert_eq!(pos.len(), 6);
            for (_, v) in col {
                assert!((v.abs() - 1.0 / 6f64.sqrt()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn appending_zero_row_leaves_f_unchanged() {
        let mut jl = jl_new(8, 3, 1).unwrap();
        let mut f = DenseMatrix::zeros(8, 4);
        jl_apply_append(&mut f, &mut jl, 1, &[0.0; 4]).unwrap();
        assert_eq!(f.as_slice(), DenseMatrix::zeros(8, 4).as_slice());
        assert_eq!(jl.cols(), 1);
    }

    #[test]
    fn first_append_is_column_outer_product() {
        let mut jl = jl_new(8, 3, 5).unwrap();
        let row = [1.0, -2.0, 0.5];
        let mut f = DenseMatrix::zeros(8, 3);
        jl_apply_append(&mut f, &mut jl, 1, &row).unwrap();
        let col = jl_new(8, 3, 5).unwrap().column(0);
        let mut expected = DenseMatrix::zeros(8, 3);
        for (pos, val) in col {
            for j in 0..3 {
                expected.set(pos, j, val * row[j]);
            }
        }
        assert_eq!(f.as_slice(), expected.as_slice());
    }

    #[test]
    fn inconsistent_append_count_rejected() {
        let mut jl = jl_new(8, 3, 5).unwrap();
        let mut f = DenseMatrix::zeros(8, 2);
        assert!(matches!(
            jl_apply_append(&mut f, &mut jl, 2, &[1.0, 1.0]),
            Err(JlError::Inconsistency { .. })
        ));
    }

    #[test]
    fn incremental_f_matches_one_shot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (m, s, d, k) = (24, 5, 4, 50);
        let mut jl = jl_new(m, s, 77).unwrap();
        let mut f = DenseMatrix::zeros(m, d);
        let mut sketch = DenseMatrix::with_cols(d);
        for i in 0..k {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            sketch.push_row(&row).unwrap();
            jl_apply_append(&mut f, &mut jl, i + 1, &row).unwrap();
        }
        let dense = jl.materialize(k).matmul(&sketch).unwrap();
        let mut diff = 0.0_f64;
        for (a, b) in f.as_slice().iter().zip(dense.as_slice()) {
            diff = diff.max((a - b).abs());
        }
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn norm_estimate_basics() {
        let h = DenseMatrix::identity(3);
        assert_eq!(jl_norm_estimate(&h, &[0.0; 3]).unwrap(), 0.0);
        let v = [1.0, 2.0, -2.0];
        assert!((jl_norm_estimate(&h, &v).unwrap() - 9.0).abs() < 1e-15);
        assert!(jl_norm_estimate(&h, &[1.0]).is_err());
    }

    #[test]
    fn squared_norm_is_unbiased_over_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let k = 12;
        let x: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let direct: f64 = x.iter().map(|v| v * v).sum();
        let mut mean = 0.0;
        let trials = 10_000;
        for seed in 0..trials {
            let jl = jl_new(16, 4, seed).unwrap();
            let jx = jl.apply(&x);
            mean += jx.iter().map(|v| v * v).sum::<f64>();
        }
        mean /= trials as f64;
        assert!((mean - direct).abs() <= 0.02 * direct, "mean {mean} vs {direct}");
    }

    #[test]
    fn constant_distortion_at_default_scale() {
        // m = 64·ln(n/δ), s = 8·ln(n/δ): at most 1% of unit vectors fall
        // outside (1 ± 1/2)‖x‖² across 100 seeds.
        let logterm = (10_000.0_f64 / 0.01).ln();
        let m = (64.0 * logterm).ceil() as usize;
        let s = ((8.0 * logterm).ceil() as usize).min(m);
        let k = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut bad = 0u64;
        let mut total = 0u64;
        for seed in 0..100 {
            let jl = jl_new(m, s, seed).unwrap();
            for _ in 0..10 {
                let mut x: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in &mut x {
                    *v /= norm;
                }
                let jx = jl.apply(&x);
                let nx: f64 = jx.iter().map(|v| v * v).sum();
                total += 1;
                if !(0.5..=1.5).contains(&nx) {
                    bad += 1;
                }
            }
        }
        assert!(bad * 100 <= total, "{bad}/{total} outside the band");
    }

    #[test]
    fn leverage_estimates_within_constant_factor() {
        // w̃ = ‖(J Ã Ḡ) a‖² stays within [1/4, 4] of aᵀ Ḡ a.
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let (n, d) = (60, 5);
        let (m, s) = default_dims(1000, 0.01);
        let mut ok = 0;
        let mut total = 0;
        for seed in 0..40 {
            let mut sketch = DenseMatrix::with_cols(d);
            for _ in 0..n {
                let row: Vec<f64> =
                    (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
                sketch.push_row(&row).unwrap();
            }
            let g = linalg::gram(&sketch).unwrap();
            let ginv = linalg::pseudo_inverse(&g, 1e-12).unwrap();
            let jl = jl_new(m, s, seed).unwrap();
            let f = jl.materialize(n).matmul(&sketch).unwrap();
            let h = f.matmul(&ginv.as_matrix()).unwrap();
            for _ in 0..25 {
                let a: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
                let exact = ginv.quadratic_form(&a).unwrap();
                let est = jl_norm_estimate(&h, &a).unwrap();
                total += 1;
                if est >= exact / 4.0 && est <= exact * 4.0 {
                    ok += 1;
                }
            }
        }
        assert!(ok * 100 >= total * 95, "{ok}/{total} within factor 4");
    }
}
