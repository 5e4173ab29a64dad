//! Block compression for approximate online Lewis weights in sublinear space.
//!
//! Rows are buffered in B₀. Once B₀ exceeds its capacity Q, the buffered
//! rows together with every lower nonempty block are Lewis-weight sampled
//! into the lowest empty block, binary-counter style, so at most
//! log₂(n) + 1 blocks are ever live. The weight of the newest row inside the
//! concatenation B_L ∘ … ∘ B₀ is a (1 ± η)-approximation of its exact online
//! Lewis weight.
//!
//! One interpretive choice: when an arriving row triggers a compression, the
//! row itself is held out of the sampled batch and re-seeded into B₀. The
//! preservation lemma treats the uncompressed tail as exempt from sampling,
//! and holding the row out keeps it available as the literal last row for
//! the weight query that follows.

use crate::lewis::{self, LewisError};
use crate::linalg::{self, DenseMatrix, LinalgError};
use crate::sketch::{decide, DecisionRng, SketchError};
use thiserror::Error;

/// RNG stream keys ≥ this value are reserved for compression trees.
pub const TREE_STREAM_BASE: u64 = 1000;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("compressed block {block} holds {rows} rows, above the hard cap {cap}")]
    CapacityOverflow { block: usize, rows: usize, cap: usize },
    #[error("all {0} block levels are occupied; declared stream bound too small")]
    LevelsExhausted(usize),
    #[error("weight query did not converge; last iterate gives {weight:.6e}")]
    WeightsNotConverged { weight: f64 },
    #[error("snapshot rejected: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Sketch(#[from] SketchError),
}

/// Tunables for one tree. The paper pins only the asymptotic shapes of Q and
/// β; the leading constants here are calibrated so that desk-scale streams
/// both compress and stay inside the (1 ± η) band.
#[derive(Debug, Clone, Copy)]
pub struct TreeConfig {
    /// Target distortion of the returned weights.
    pub eta: f64,
    /// Failure budget feeding the β formula.
    pub delta: f64,
    /// Declared upper bound on the stream length; fixes the level count.
    pub n_max: u64,
    /// Buffer capacity override; `None` uses q_const·d·log₂(2n)/η².
    pub q_cap: Option<usize>,
    /// Oversampling override; `None` uses b_const·log₂(2n/δ)/η².
    pub beta_c: Option<f64>,
    pub q_const: f64,
    pub b_const: f64,
    /// Compressed blocks above hard_cap_factor·R abort the trial.
    pub hard_cap_factor: f64,
    /// Fixed-point tolerance for weight queries (p < 2).
    pub weight_tol: f64,
    /// Fixed-point tolerance used when compressing (p < 2).
    pub compress_tol: f64,
    /// Reuse the previous query's weights as the next starting point.
    /// Disable to reproduce the cold-start iteration bit-for-bit.
    pub warm_start: bool,
}

impl TreeConfig {
    pub fn new(n_max: u64) -> Self {
        Self {
            eta: 0.5,
            delta: 0.01,
            n_max,
            q_cap: None,
            beta_c: None,
            q_const: 2.0,
            b_const: 0.6,
            hard_cap_factor: 4.0,
            weight_tol: 1e-3,
            compress_tol: 1e-4,
            warm_start: true,
        }
    }
}

fn log2_ceil(n: u64) -> u32 {
    64 - n.max(1).next_power_of_two().leading_zeros() - 1
}

/// The blocks B₀ … B_L of the streaming compression scheme.
#[derive(Debug, Clone)]
pub struct CompressionTree {
    p: f64,
    d: usize,
    config: TreeConfig,
    q: usize,
    beta: f64,
    row_cap: usize,
    blocks: Vec<DenseMatrix>,
    rows_seen: u64,
    compressions: u64,
    rng: DecisionRng,
    draw_counter: u64,
    // p = 2 answers queries from this Gram alone; rebuilt on compression
    gram: DenseMatrix,
    // previous converged weights in concat order, for warm starts
    warm: Option<Vec<f64>>,
}

impl CompressionTree {
    pub fn new(p: f64, d: usize, seed: u64, stream_tag: u64, config: TreeConfig) -> Self {
        assert!((1.0..=2.0).contains(&p));
        assert!(d >= 1);
        let eta2 = config.eta * config.eta;
        let n = config.n_max.max(2);
        let q = config
            .q_cap
            .unwrap_or(((config.q_const * d as f64 * ((2 * n) as f64).log2()) / eta2).ceil()
                as usize)
            .max(2 * d);
        let beta = config
            .beta_c
            .unwrap_or(config.b_const * ((2 * n) as f64 / config.delta).log2() / eta2)
            .max(1.0);
        let levels = log2_ceil(n) as usize + 2;
        let row_cap = (2.0 * beta * d as f64).ceil() as usize;
        Self {
            p,
            d,
            config,
            q,
            beta,
            row_cap,
            blocks: vec![DenseMatrix::with_cols(d); levels],
            rows_seen: 0,
            compressions: 0,
            rng: DecisionRng::new(seed, TREE_STREAM_BASE + stream_tag),
            draw_counter: 0,
            gram: DenseMatrix::zeros(d, d),
            warm: None,
        }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn rows_seen(&self) -> u64 {
        self.rows_seen
    }

    pub fn compressions(&self) -> u64 {
        self.compressions
    }

    pub fn q_capacity(&self) -> usize {
        self.q
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn total_stored_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.rows()).sum()
    }

    pub fn blocks(&self) -> &[DenseMatrix] {
        &self.blocks
    }

    /// Concatenation B_L ∘ … ∘ B₀ in query order.
    pub fn concatenated(&self) -> DenseMatrix {
        let mut out = DenseMatrix::with_cols(self.d);
        for block in self.blocks.iter().rev() {
            for r in 0..block.rows() {
                out.push_row(block.row(r)).expect("stored rows are finite");
            }
        }
        out
    }

    /// Appends one row, compressing if B₀ overflows.
    pub fn ingest(&mut self, row: &[f64]) -> Result<(), TreeError> {
        if row.len() != self.d {
            return Err(TreeError::Linalg(LinalgError::DimensionMismatch {
                expected: self.d,
                got: row.len(),
            }));
        }
        self.blocks[0].push_row(row)?;
        self.rows_seen += 1;
        if self.p == 2.0 {
            linalg::accumulate_outer(&mut self.gram, row, 1.0);
            linalg::symmetrize(&mut self.gram);
        } else if let Some(w) = self.warm.as_mut() {
            w.push(1.0);
        }
        if self.blocks[0].rows() > self.q {
            self.compress(row)?;
        }
        Ok(())
    }

    /// Merges B_{j−1} ∘ … ∘ B₀ (minus the newest row) into the lowest empty
    /// block by Lewis-weight sampling with rescale.
    fn compress(&mut self, newest: &[f64]) -> Result<(), TreeError> {
        let j = match self.blocks.iter().skip(1).position(|b| b.is_empty()) {
            Some(idx) => idx + 1,
            None => return Err(TreeError::LevelsExhausted(self.blocks.len())),
        };
        let mut merged = DenseMatrix::with_cols(self.d);
        for block in self.blocks[..j].iter().rev() {
            for r in 0..block.rows() {
                merged.push_row(block.row(r))?;
            }
        }
        // drop the newest row from the batch; it re-seeds B₀ below
        let keep = merged.rows() - 1;
        let mut batch = DenseMatrix::with_cols(self.d);
        for r in 0..keep {
            batch.push_row(merged.row(r))?;
        }

        let weights = if self.p == 2.0 {
            lewis::leverage_scores(&batch)?.weights
        } else {
            match lewis::lewis_weights(&batch, self.p, self.config.compress_tol, 200) {
                Ok(w) => w.weights,
                Err(LewisError::NotConverged(w)) => w.weights,
                Err(LewisError::Linalg(e)) => return Err(TreeError::Linalg(e)),
            }
        };

        let mut sampled = DenseMatrix::with_cols(self.d);
        for (r, &w) in weights.iter().enumerate() {
            let p_i = (self.beta * w).min(1.0);
            let decision = decide(&self.rng, self.draw_counter, p_i, self.p)?;
            self.draw_counter += 1;
            if decision.sampled {
                sampled.push_scaled_row(batch.row(r), decision.scale.unwrap())?;
            }
        }
        let hard_cap = (self.config.hard_cap_factor * self.row_cap as f64) as usize;
        if sampled.rows() > hard_cap {
            return Err(TreeError::CapacityOverflow {
                block: j,
                rows: sampled.rows(),
                cap: hard_cap,
            });
        }
        self.blocks[j] = sampled;
        for block in self.blocks[..j].iter_mut() {
            *block = DenseMatrix::with_cols(self.d);
        }
        self.blocks[0].push_row(newest)?;
        self.compressions += 1;
        self.warm = None;
        if self.p == 2.0 {
            self.gram = Self::rebuild_gram(&self.blocks, self.d);
        }
        Ok(())
    }

    /// w̃ₜ for the most recently ingested row: its Lewis weight inside
    /// B_L ∘ … ∘ B₀.
    pub fn weight_of_last(&mut self) -> Result<f64, TreeError> {
        assert!(!self.blocks[0].is_empty(), "query order is ingest-then-weight");
        if self.p == 2.0 {
            let last = self.blocks[0].row(self.blocks[0].rows() - 1).to_vec();
            let ginv = linalg::pseudo_inverse(&self.gram, linalg::DEFAULT_PINV_REL_TOL)?;
            return Ok(ginv.quadratic_form(&last)?.min(1.0));
        }
        let concat = self.concatenated();
        let idx = concat.rows() - 1;
        self.lewis_query(&concat, idx, true)
    }

    /// w̃ for a row that is not part of the tree: virtually concatenated as
    /// the last row.
    pub fn weight_of(&mut self, row: &[f64]) -> Result<f64, TreeError> {
        if row.len() != self.d {
            return Err(TreeError::Linalg(LinalgError::DimensionMismatch {
                expected: self.d,
                got: row.len(),
            }));
        }
        if self.p == 2.0 {
            let mut g = self.gram.clone();
            linalg::accumulate_outer(&mut g, row, 1.0);
            linalg::symmetrize(&mut g);
            let ginv = linalg::pseudo_inverse(&g, linalg::DEFAULT_PINV_REL_TOL)?;
            return Ok(ginv.quadratic_form(row)?.min(1.0));
        }
        let mut concat = self.concatenated();
        concat.push_row(row)?;
        let idx = concat.rows() - 1;
        self.lewis_query(&concat, idx, false)
    }

    /// Ingest followed by the weight query for that row.
    pub fn ingest_and_weight(&mut self, row: &[f64]) -> Result<f64, TreeError> {
        self.ingest(row)?;
        self.weight_of_last()
    }

    fn lewis_query(
        &mut self,
        concat: &DenseMatrix,
        idx: usize,
        cache: bool,
    ) -> Result<f64, TreeError> {
        let result = match self.warm.as_ref().filter(|_| self.config.warm_start) {
            Some(init) if init.len() == concat.rows() => lewis::lewis_weights_warm(
                concat,
                self.p,
                self.config.weight_tol,
                lewis::DEFAULT_MAX_ITER,
                init,
            ),
            _ => lewis::lewis_weights(
                concat,
                self.p,
                self.config.weight_tol,
                lewis::DEFAULT_MAX_ITER,
            ),
        };
        match result {
            Ok(w) => {
                let value = w.weights[idx];
                if cache && self.config.warm_start {
                    self.warm = Some(w.weights);
                }
                Ok(value)
            }
            Err(LewisError::NotConverged(w)) => {
                Err(TreeError::WeightsNotConverged { weight: w.weights[idx] })
            }
            Err(LewisError::Linalg(e)) => Err(TreeError::Linalg(e)),
        }
    }

    fn rebuild_gram(blocks: &[DenseMatrix], d: usize) -> DenseMatrix {
        let mut gram = DenseMatrix::zeros(d, d);
        for block in blocks {
            for r in 0..block.rows() {
                linalg::accumulate_outer(&mut gram, block.row(r), 1.0);
            }
        }
        linalg::symmetrize(&mut gram);
        gram
    }

    /// Versioned binary snapshot of the full tree state.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        push_u16(&mut out, SNAPSHOT_VERSION);
        push_f64(&mut out, self.p);
        push_u64(&mut out, self.d as u64);
        push_f64(&mut out, self.config.eta);
        push_f64(&mut out, self.config.delta);
        push_u64(&mut out, self.config.n_max);
        push_u64(&mut out, self.q as u64);
        push_f64(&mut out, self.beta);
        push_u64(&mut out, self.row_cap as u64);
        push_f64(&mut out, self.config.hard_cap_factor);
        push_f64(&mut out, self.config.weight_tol);
        push_f64(&mut out, self.config.compress_tol);
        push_u64(&mut out, self.config.warm_start as u64);
        push_u64(&mut out, self.rows_seen);
        push_u64(&mut out, self.compressions);
        push_u64(&mut out, self.draw_counter);
        push_u64(&mut out, self.rng.seed());
        push_u64(&mut out, self.rng.stream());
        push_u64(&mut out, self.blocks.len() as u64);
        for block in &self.blocks {
            push_u64(&mut out, block.rows() as u64);
            for v in block.as_slice() {
                push_f64(&mut out, *v);
            }
        }
        out
    }

    pub fn restore(bytes: &[u8]) -> Result<Self, TreeError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != SNAPSHOT_MAGIC {
            return Err(TreeError::Snapshot("bad magic".into()));
        }
        let version = cur.u16()?;
        if version != SNAPSHOT_VERSION {
            return Err(TreeError::Snapshot(format!("unsupported version {version}")));
        }
        let p = cur.f64()?;
        let d = cur.u64()? as usize;
        let eta = cur.f64()?;
        let delta = cur.f64()?;
        let n_max = cur.u64()?;
        let q = cur.u64()? as usize;
        let beta = cur.f64()?;
        let row_cap = cur.u64()? as usize;
        let hard_cap_factor = cur.f64()?;
        let weight_tol = cur.f64()?;
        let compress_tol = cur.f64()?;
        let warm_start = cur.u64()? != 0;
        let rows_seen = cur.u64()?;
        let compressions = cur.u64()?;
        let draw_counter = cur.u64()?;
        let seed = cur.u64()?;
        let stream = cur.u64()?;
        let levels = cur.u64()? as usize;
        let mut blocks = Vec::with_capacity(levels);
        for _ in 0..levels {
            let rows = cur.u64()? as usize;
            let mut data = Vec::with_capacity(rows * d);
            for _ in 0..rows * d {
                data.push(cur.f64()?);
            }
            blocks.push(
                DenseMatrix::from_row_major(rows, d, data)
                    .map_err(|e| TreeError::Snapshot(e.to_string()))?,
            );
        }
        let config = TreeConfig {
            eta,
            delta,
            n_max,
            q_cap: Some(q),
            beta_c: Some(beta),
            q_const: 0.0,
            b_const: 0.0,
            hard_cap_factor,
            weight_tol,
            compress_tol,
            warm_start,
        };
        let gram = if p == 2.0 { Self::rebuild_gram(&blocks, d) } else { DenseMatrix::zeros(d, d) };
        Ok(Self {
            p,
            d,
            config,
            q,
            beta,
            row_cap,
            blocks,
            rows_seen,
            compressions,
            rng: DecisionRng::new(seed, stream),
            draw_counter,
            gram,
            warm: None,
        })
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"OLTR";
const SNAPSHOT_VERSION: u16 = 1;

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TreeError> {
        if self.pos + n > self.bytes.len() {
            return Err(TreeError::Snapshot(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, TreeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TreeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, TreeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_row(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
    }

    fn no_compress_config(n: u64) -> TreeConfig {
        let mut c = TreeConfig::new(n);
        c.q_cap = Some(usize::MAX / 2);
        c.warm_start = false;
        c
    }

    #[test]
    fn infinite_q_stores_stream_verbatim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tree = CompressionTree::new(1.5, 3, 9, 0, no_compress_config(64));
        let mut rows = Vec::new();
        for _ in 0..50 {
            let row = gaussian_row(&mut rng, 3);
            tree.ingest(&row).unwrap();
            rows.push(row);
        }
        assert_eq!(tree.compressions(), 0);
        assert_eq!(tree.total_stored_rows(), 50);
        let concat = tree.concatenated();
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(concat.row(i), row.as_slice());
        }
    }

    #[test]
    fn infinite_q_weights_match_exact_online_weights_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &p in &[1.0, 1.5, 2.0] {
            let mut cfg = no_compress_config(64);
            cfg.weight_tol = crate::lewis::DEFAULT_TOL;
            let mut tree = CompressionTree::new(p, 3, 11, 0, cfg);
            let mut prefix = DenseMatrix::with_cols(3);
            for _ in 0..40 {
                let row = gaussian_row(&mut rng, 3);
                prefix.push_row(&row).unwrap();
                let w = tree.ingest_and_weight(&row).unwrap();
                let oracle =
                    crate::lewis::online_lewis_weights_exact(&prefix, p, crate::lewis::DEFAULT_TOL)
                        .unwrap();
                let expect = *oracle.last().unwrap();
                assert_eq!(w.to_bits(), expect.to_bits(), "p={p} t={}", prefix.rows());
            }
        }
    }

    #[test]
    fn first_row_has_weight_one() {
        for &p in &[1.0, 1.5, 2.0] {
            let mut tree = CompressionTree::new(p, 4, 3, 0, TreeConfig::new(128));
            let w = tree.ingest_and_weight(&[0.3, -1.0, 2.0, 0.1]).unwrap();
            assert!((w - 1.0).abs() < 1e-9, "p={p} w={w}");
        }
    }

    #[test]
    fn duplicate_heavy_stream_collapses() {
        let mut cfg = TreeConfig::new(4096);
        cfg.q_cap = Some(64);
        cfg.beta_c = Some(24.0);
        let mut tree = CompressionTree::new(2.0, 3, 5, 0, cfg);
        let n = 4 * 64;
        for _ in 0..n {
            tree.ingest(&[1.0, 0.0, 0.0]).unwrap();
        }
        assert!(tree.compressions() > 0);
        let stored = tree.total_stored_rows();
        assert!(
            stored <= 64 + 4 * 24,
            "{stored} rows stored for a stream of duplicates"
        );
    }

    #[test]
    fn compressed_weights_stay_within_band_of_oracle() {
        // small-scale version of the Theorem 2 acceptance run
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &p in &[1.0, 2.0] {
            let (n, d) = (256, 4);
            let mut ok_trials = 0;
            let trials = 20;
            for trial in 0..trials {
                let mut full = DenseMatrix::with_cols(d);
                for _ in 0..n {
                    full.push_row(&gaussian_row(&mut rng, d)).unwrap();
                }
                let oracle = crate::lewis::online_lewis_weights_exact(&full, p, 1e-8).unwrap();

                let mut cfg = TreeConfig::new(n as u64);
                cfg.q_cap = Some(60);
                let mut tree = CompressionTree::new(p, d, trial as u64, 0, cfg);
                let mut all_in = true;
                for (t, exact) in oracle.iter().enumerate() {
                    let w = tree.ingest_and_weight(full.row(t)).unwrap();
                    if w < 0.5 * exact - 1e-9 || w > 1.5 * exact + 1e-9 {
                        all_in = false;
                    }
                }
                assert!(tree.compressions() > 0, "test must exercise compression");
                if all_in {
                    ok_trials += 1;
                }
            }
            assert!(ok_trials * 100 >= trials * 90, "p={p}: {ok_trials}/{trials}");
        }
    }

    #[test]
    fn one_compression_round_preserves_tail_weights() {
        // two sampled blocks plus an exempt tail, β at the preservation
        // lemma's scale for η_round = η/(2·log₂ n), η = 0.5, n = 1024
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 4;
        let eta_round = 0.5 / (2.0 * 10.0);
        let beta = (1.0 / (eta_round * eta_round)) * (d as f64 / 0.01).ln();
        let mut ok = 0;
        let trials = 60;
        for trial in 0..trials {
            let mut a1 = DenseMatrix::with_cols(d);
            let mut a2 = DenseMatrix::with_cols(d);
            let mut tail = DenseMatrix::with_cols(d);
            for _ in 0..50 {
                a1.push_row(&gaussian_row(&mut rng, d)).unwrap();
                a2.push_row(&gaussian_row(&mut rng, d)).unwrap();
            }
            for _ in 0..10 {
                tail.push_row(&gaussian_row(&mut rng, d)).unwrap();
            }
            let m = a1.vcat(&a2).unwrap().vcat(&tail).unwrap();
            let full = crate::lewis::lewis_weights(&m, 1.0, 1e-10, 300).unwrap();

            let rng_s = DecisionRng::new(trial as u64, 77);
            let mut draws = 0u64;
            let mut compressed = DenseMatrix::with_cols(d);
            for block in [&a1, &a2] {
                let w = crate::lewis::lewis_weights(block, 1.0, 1e-10, 300).unwrap();
                for r in 0..block.rows() {
                    let p_i = (beta * w.weights[r]).min(1.0);
                    let decision = decide(&rng_s, draws, p_i, 1.0).unwrap();
                    draws += 1;
                    if decision.sampled {
                        compressed.push_scaled_row(block.row(r), decision.scale.unwrap()).unwrap();
                    }
                }
            }
            let start = compressed.rows();
            let mprime = compressed.vcat(&tail).unwrap();
            let after = crate::lewis::lewis_weights(&mprime, 1.0, 1e-10, 300).unwrap();
            let mut all_in = true;
            for j in 0..10 {
                let before = full.weights[100 + j];
                let now = after.weights[start + j];
                if now < (1.0 - eta_round) * before || now > (1.0 + eta_round) * before {
                    all_in = false;
                }
            }
            if all_in {
                ok += 1;
            }
        }
        assert!(ok * 100 >= trials * 95, "{ok}/{trials} trials inside the band");
    }

    #[test]
    fn stored_rows_grow_sublinearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 4;
        let mut stored = Vec::new();
        for &n in &[1u64 << 10, 1 << 13] {
            let mut tree = CompressionTree::new(2.0, d, 3, 0, TreeConfig::new(n));
            for _ in 0..n {
                tree.ingest(&gaussian_row(&mut rng, d)).unwrap();
            }
            assert!(tree.compressions() > 0);
            stored.push(tree.total_stored_rows());
        }
        assert!(
            stored[1] <= 2 * stored[0],
            "stored rows grew {} -> {} across an 8x longer stream",
            stored[0],
            stored[1]
        );
    }

    #[test]
    fn query_cost_is_bounded_by_blocks_not_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let d = 4;
        let n = 1u64 << 12;
        let mut tree = CompressionTree::new(1.5, d, 3, 0, TreeConfig::new(n));
        for _ in 0..n {
            tree.ingest(&gaussian_row(&mut rng, d)).unwrap();
        }
        let bound = tree.q_capacity()
            + tree.blocks().len() * (2.0 * tree.beta() * d as f64).ceil() as usize;
        assert!(tree.concatenated().rows() <= bound);
    }

    #[test]
    fn capacity_overflow_signals_misconfiguration() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut cfg = TreeConfig::new(512);
        cfg.q_cap = Some(16);
        cfg.beta_c = Some(1e9);
        cfg.hard_cap_factor = 1e-9;
        let mut tree = CompressionTree::new(2.0, 3, 1, 0, cfg);
        let mut saw_overflow = false;
        for _ in 0..64 {
            match tree.ingest(&gaussian_row(&mut rng, 3)) {
                Ok(()) => {}
                Err(TreeError::CapacityOverflow { .. }) => {
                    saw_overflow = true;
                    break;
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(saw_overflow);
    }

    #[test]
    fn snapshot_roundtrip_preserves_behavior() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let d = 3;
        let mut cfg = TreeConfig::new(1024);
        cfg.q_cap = Some(40);
        let mut tree = CompressionTree::new(1.0, d, 77, 2, cfg);
        for _ in 0..100 {
            tree.ingest(&gaussian_row(&mut rng, d)).unwrap();
        }
        let blob = tree.snapshot();
        let mut restored = CompressionTree::restore(&blob).unwrap();
        assert_eq!(restored.rows_seen(), tree.rows_seen());
        assert_eq!(restored.total_stored_rows(), tree.total_stored_rows());
        // identical behavior from here on
        for _ in 0..60 {
            let row = gaussian_row(&mut rng, d);
            let a = tree.ingest_and_weight(&row).unwrap();
            let b = restored.ingest_and_weight(&row).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(tree.snapshot(), restored.snapshot());

        assert!(matches!(
            CompressionTree::restore(&blob[..10]),
            Err(TreeError::Snapshot(_))
        ));
        let mut bad = blob.clone();
        bad[0] = b'X';
        assert!(matches!(CompressionTree::restore(&bad), Err(TreeError::Snapshot(_))));
    }
}
