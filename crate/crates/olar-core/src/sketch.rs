//! Rescaled row sampling, sketch accumulation and the label-query ledger.
//!
//! A row with sampling probability pᵢ is kept with exactly that probability
//! and, when kept, rescaled by pᵢ^{−1/p}, which makes ‖SAx − Sb‖ₚᵖ an
//! unbiased estimate of ‖Ax − b‖ₚᵖ. Labels are fetched through a
//! [`LabelSource`] only at the moment a row is kept, so the ledger equals the
//! number of labels ever revealed.
//!
//! Randomness is counter-based: every decision is a pure function of
//! (master seed, stream key, stream position). The parallel samplers of the
//! pipelines use distinct stream keys and are therefore independent and
//! individually reproducible.

use crate::linalg::{DenseMatrix, DenseVector, LinalgError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SketchError {
    #[error("invalid probability {0}")]
    InvalidProbability(f64),
    #[error("query budget exhausted")]
    BudgetExhausted,
    #[error("label fetch failed at row {index}: {msg}")]
    LabelFetch { index: u64, msg: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Source of labels; fetching is the observable "query" action.
pub trait LabelSource {
    fn fetch(&mut self, index: u64) -> Result<f64, SketchError>;
}

/// In-memory label store that counts every reveal. Used in tests and by the
/// synthetic benchmark harness.
pub struct VecLabelSource {
    labels: Vec<f64>,
    pub invocations: u64,
}

impl VecLabelSource {
    pub fn new(labels: Vec<f64>) -> Self {
        Self { labels, invocations: 0 }
    }
}

impl LabelSource for VecLabelSource {
    fn fetch(&mut self, index: u64) -> Result<f64, SketchError> {
        self.invocations += 1;
        self.labels
            .get(index as usize)
            .copied()
            .ok_or(SketchError::LabelFetch { index, msg: "index out of range".into() })
    }
}

/// Identifies one of the parallel sampling processes for both ledger
/// accounting and RNG stream separation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageId {
    /// The always-queried first d rows.
    Retain,
    /// The constant-factor stage S.
    Main,
    /// The residual base stage S₁ (samples rows, never queries labels).
    S1,
    /// The constant-factor residual stage S₂.
    S2,
    /// The near-optimal residual stage S₃.
    S3,
    /// Held-out sketch used by the boosting selection rule.
    Validation,
    /// Single-stage sampler of the budgeted benchmark mode.
    Budget,
}

pub const STAGE_COUNT: usize = 7;

impl StageId {
    pub fn index(self) -> usize {
        match self {
            StageId::Retain => 0,
            StageId::Main => 1,
            StageId::S1 => 2,
            StageId::S2 => 3,
            StageId::S3 => 4,
            StageId::Validation => 5,
            StageId::Budget => 6,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            StageId::Retain => "retain",
            StageId::Main => "S",
            StageId::S1 => "S1",
            StageId::S2 => "S2",
            StageId::S3 => "S3",
            StageId::Validation => "validation",
            StageId::Budget => "budget",
        }
    }

    /// RNG stream key; compression trees use keys ≥ 1000 (see `compress`).
    pub fn stream_key(self) -> u64 {
        self.index() as u64
    }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based deterministic RNG keyed by (master seed, stream key).
/// `uniform(position)` is a pure function; replaying a stream replays every
/// decision bit-for-bit.
#[derive(Debug, Clone, Copy)]
pub struct DecisionRng {
    master_seed: u64,
    stream: u64,
}

impl DecisionRng {
    pub fn new(master_seed: u64, stream: u64) -> Self {
        Self { master_seed, stream }
    }

    pub fn for_stage(master_seed: u64, stage: StageId) -> Self {
        Self::new(master_seed, stage.stream_key())
    }

    pub fn uniform(&self, position: u64) -> f64 {
        let h = splitmix(splitmix(splitmix(self.master_seed) ^ self.stream) ^ position);
        // take the top 53 bits for an exact dyadic in [0, 1)
        (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Derives a fresh master seed, used for boosting runs.
    pub fn derive_seed(master_seed: u64, run: u64) -> u64 {
        splitmix(splitmix(master_seed) ^ splitmix(run ^ 0x5eed))
    }
}

/// Outcome of one Bernoulli sampling decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingDecision {
    pub row_index: u64,
    pub probability: f64,
    pub sampled: bool,
    /// pᵢ^{−1/p}; present exactly when the row was kept with pᵢ > 0.
    pub scale: Option<f64>,
}

/// Samples with exactly probability `p_i` and attaches the rescale factor.
/// Probability 1 is deterministic keep, probability 0 deterministic skip.
pub fn decide(
    rng: &DecisionRng,
    row_index: u64,
    p_i: f64,
    norm_p: f64,
) -> Result<SamplingDecision, SketchError> {
    if !p_i.is_finite() || !(0.0..=1.0).contains(&p_i) {
        return Err(SketchError::InvalidProbability(p_i));
    }
    let sampled = rng.uniform(row_index) < p_i;
    let scale = if sampled && p_i > 0.0 { Some(p_i.powf(-1.0 / norm_p)) } else { None };
    Ok(SamplingDecision { row_index, probability: p_i, sampled, scale })
}

/// Probability and row scale for two composed sampling stages: the stored row
/// carries (p_outer · p_inner)^{−1/p}.
pub fn composed_probability(
    p_outer: f64,
    p_inner: f64,
    norm_p: f64,
) -> Result<(f64, f64), SketchError> {
    for &p in &[p_outer, p_inner] {
        if !p.is_finite() || !(p > 0.0 && p <= 1.0) {
            return Err(SketchError::InvalidProbability(p));
        }
    }
    let prob = p_outer * p_inner;
    Ok((prob, prob.powf(-1.0 / norm_p)))
}

/// Audit structure counting every label reveal, per stage, with an optional
/// hard cap used by the budgeted benchmark mode.
#[derive(Debug, Clone)]
pub struct QueryLedger {
    counts: [u64; STAGE_COUNT],
    pub budget: Option<u64>,
}

impl QueryLedger {
    pub fn new(budget: Option<u64>) -> Self {
        Self { counts: [0; STAGE_COUNT], budget }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn stage(&self, stage: StageId) -> u64 {
        self.counts[stage.index()]
    }

    pub fn remaining(&self) -> Option<u64> {
        self.budget.map(|b| b.saturating_sub(self.total()))
    }

    /// Records one query; fails without mutating when the cap would be
    /// exceeded.
    pub fn charge(&mut self, stage: StageId) -> Result<(), SketchError> {
        if let Some(b) = self.budget {
            if self.total() + 1 > b {
                return Err(SketchError::BudgetExhausted);
            }
        }
        self.counts[stage.index()] += 1;
        Ok(())
    }

    pub fn per_stage(&self) -> Vec<(&'static str, u64)> {
        [
            StageId::Retain,
            StageId::Main,
            StageId::S1,
            StageId::S2,
            StageId::S3,
            StageId::Validation,
            StageId::Budget,
        ]
        .iter()
        .map(|s| (s.label(), self.counts[s.index()]))
        .collect()
    }
}

/// Accumulated rescaled sample: rows of S·A, optionally S·b, and the
/// decisions that admitted them. Skipped rows leave no trace beyond the RNG
/// position, keeping the sketch sublinear in the stream length.
#[derive(Debug, Clone)]
pub struct WeightedSketch {
    p: f64,
    stage: StageId,
    tracks_labels: bool,
    rows: DenseMatrix,
    labels: DenseVector,
    decisions: Vec<SamplingDecision>,
}

impl WeightedSketch {
    pub fn new(p: f64, d: usize, stage: StageId, tracks_labels: bool) -> Self {
        Self {
            p,
            stage,
            tracks_labels,
            rows: DenseMatrix::with_cols(d),
            labels: DenseVector::zeros(0),
            decisions: Vec::new(),
        }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn rows(&self) -> &DenseMatrix {
        &self.rows
    }

    pub fn labels(&self) -> &DenseVector {
        &self.labels
    }

    pub fn decisions(&self) -> &[SamplingDecision] {
        &self.decisions
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last_row(&self) -> Option<&[f64]> {
        if self.rows.is_empty() {
            None
        } else {
            Some(self.rows.row(self.rows.rows() - 1))
        }
    }

    /// Admits a row that is kept deterministically (the retained prefix),
    /// with scale 1 and its label already fetched by the caller.
    pub fn push_retained(
        &mut self,
        row_index: u64,
        row: &[f64],
        label: Option<f64>,
    ) -> Result<(), SketchError> {
        self.rows.push_row(row)?;
        if self.tracks_labels {
            let b = label.expect("retained row in a label-tracking sketch needs a label");
            self.labels.push(b).map_err(SketchError::Linalg)?;
        }
        self.decisions.push(SamplingDecision {
            row_index,
            probability: 1.0,
            sampled: true,
            scale: Some(1.0),
        });
        Ok(())
    }

    /// Admits an unlabeled row kept by an external decision (the S₁ stage).
    pub fn push_sampled_row(
        &mut self,
        decision: SamplingDecision,
        row: &[f64],
    ) -> Result<(), SketchError> {
        debug_assert!(decision.sampled && !self.tracks_labels);
        let scale = decision.scale.ok_or(SketchError::InvalidProbability(0.0))?;
        self.rows.push_scaled_row(row, scale)?;
        self.decisions.push(decision);
        Ok(())
    }

    /// Debug dump: `stage,row_index,probability,scale,queried` per kept row.
    pub fn dump_csv(&self) -> String {
        let mut out = String::from("stage,row_index,probability,scale,queried\n");
        for d in &self.decisions {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.stage.label(),
                d.row_index,
                d.probability,
                d.scale.unwrap_or(f64::NAN),
                self.tracks_labels,
            ));
        }
        out
    }
}

/// One online sampling step: decide on the row, and only if it is kept,
/// charge the ledger, query the label and append the rescaled pair.
///
/// `row` must already carry any outer-stage rescale; `label_outer_scale` is
/// that same factor so the raw label receives the composed scale. A
/// `BudgetExhausted` ledger means the row is skipped and the label is never
/// fetched.
#[allow(clippy::too_many_arguments)]
pub fn sample_step(
    sketch: &mut WeightedSketch,
    ledger: &mut QueryLedger,
    rng: &DecisionRng,
    row_index: u64,
    row: &[f64],
    label_outer_scale: f64,
    p_t: f64,
    labels: &mut dyn LabelSource,
) -> Result<SamplingDecision, SketchError> {
    let decision = decide(rng, row_index, p_t, sketch.p)?;
    if !decision.sampled {
        return Ok(decision);
    }
    ledger.charge(sketch.stage)?;
    let scale = decision.scale.expect("sampled decision with positive probability");
    let b_t = labels.fetch(row_index)?;
    sketch.rows.push_scaled_row(row, scale)?;
    if sketch.tracks_labels {
        sketch.labels.push(b_t * label_outer_scale * scale).map_err(SketchError::Linalg)?;
    }
    sketch.decisions.push(decision);
    Ok(decision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forced_decisions() {
        let rng = DecisionRng::new(1, 0);
        let keep = decide(&rng, 0, 1.0, 2.0).unwrap();
        assert!(keep.sampled);
        assert_eq!(keep.scale, Some(1.0));
        let skip = decide(&rng, 0, 0.0, 2.0).unwrap();
        assert!(!skip.sampled);
        assert_eq!(skip.scale, None);
    }

    #[test]
    fn invalid_probability_rejected() {
        let rng = DecisionRng::new(1, 0);
        assert!(decide(&rng, 0, -0.1, 2.0).is_err());
        assert!(decide(&rng, 0, 1.1, 2.0).is_err());
        assert!(decide(&rng, 0, f64::NAN, 2.0).is_err());
    }

    #[test]
    fn empirical_rate_half() {
        let rng = DecisionRng::new(99, 3);
        let n = 100_000u64;
        let kept = (0..n).filter(|&i| decide(&rng, i, 0.5, 2.0).unwrap().sampled).count();
        let rate = kept as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn decisions_are_reproducible_and_streams_differ() {
        let a = DecisionRng::new(7, 1);
        let b = DecisionRng::new(7, 1);
        let c = DecisionRng::new(7, 2);
        let mut diff = 0;
        for i in 0..1000 {
            assert_eq!(a.uniform(i).to_bits(), b.uniform(i).to_bits());
            if (a.uniform(i) < 0.5) != (c.uniform(i) < 0.5) {
                diff += 1;
            }
        }
        assert!(diff > 300, "streams should be independent, only {diff} differing");
    }

    #[test]
    fn composed_probability_examples() {
        assert_eq!(composed_probability(1.0, 1.0, 2.0).unwrap(), (1.0, 1.0));
        let (p, s) = composed_probability(0.5, 0.5, 2.0).unwrap();
        assert!((p - 0.25).abs() < 1e-15);
        assert!((s - 2.0).abs() < 1e-12);
        let (p, s) = composed_probability(0.2, 0.4, 1.0).unwrap();
        assert!((p - 0.08).abs() < 1e-15);
        assert!((s - 12.5).abs() < 1e-9);
        assert!(composed_probability(0.0, 0.5, 1.0).is_err());
    }

    fn run_stream(
        p: f64,
        probs: &[f64],
        rows: &[Vec<f64>],
        labels: Vec<f64>,
        seed: u64,
        budget: Option<u64>,
    ) -> (WeightedSketch, QueryLedger, u64) {
        let d = rows[0].len();
        let mut sketch = WeightedSketch::new(p, d, StageId::Main, true);
        let mut ledger = QueryLedger::new(budget);
        let rng = DecisionRng::for_stage(seed, StageId::Main);
        let mut source = VecLabelSource::new(labels);
        for (i, row) in rows.iter().enumerate() {
            match sample_step(
                &mut sketch,
                &mut ledger,
                &rng,
                i as u64,
                row,
                1.0,
                probs[i],
                &mut source,
            ) {
                Ok(_) => {}
                Err(SketchError::BudgetExhausted) => {}
                Err(e) => panic!("{e}"),
            }
        }
        let invocations = source.invocations;
        (sketch, ledger, invocations)
    }

    #[test]
    fn all_ones_is_identity_sketch() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0]).collect();
        let labels: Vec<f64> = (0..5).map(|i| i as f64 * 2.0).collect();
        let (sketch, ledger, inv) = run_stream(2.0, &[1.0; 5], &rows, labels.clone(), 5, None);
        assert_eq!(sketch.len(), 5);
        assert_eq!(ledger.total(), 5);
        assert_eq!(inv, 5);
        for i in 0..5 {
            assert_eq!(sketch.rows().row(i), rows[i].as_slice());
            assert_eq!(sketch.labels().get(i), labels[i]);
        }
    }

    #[test]
    fn all_zeros_is_empty_sketch() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0]).collect();
        let (sketch, ledger, inv) = run_stream(2.0, &[0.0; 5], &rows, vec![0.0; 5], 5, None);
        assert!(sketch.is_empty());
        assert_eq!(ledger.total(), 0);
        assert_eq!(inv, 0);
    }

    #[test]
    fn label_source_invocations_equal_ledger() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<Vec<f64>> =
            (0..50).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let probs: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        for seed in 0..20 {
            let (sketch, ledger, inv) = run_stream(1.5, &probs, &rows, vec![1.0; 50], seed, None);
            assert_eq!(inv, ledger.total());
            assert_eq!(sketch.len() as u64, ledger.total());
        }
    }

    #[test]
    fn budget_cap_forces_skip_without_query() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let (sketch, ledger, inv) = run_stream(1.0, &[1.0; 10], &rows, vec![0.0; 10], 3, Some(4));
        assert_eq!(sketch.len(), 4);
        assert_eq!(ledger.total(), 4);
        assert_eq!(inv, 4);
    }

    #[test]
    fn determinism_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> =
            (0..40).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let probs: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
        let (s1, l1, _) = run_stream(1.5, &probs, &rows, vec![1.0; 40], 77, None);
        let (s2, l2, _) = run_stream(1.5, &probs, &rows, vec![1.0; 40], 77, None);
        assert_eq!(s1.rows().as_slice(), s2.rows().as_slice());
        assert_eq!(s1.labels().as_slice(), s2.labels().as_slice());
        assert_eq!(l1.total(), l2.total());
        assert_eq!(s1.dump_csv(), s2.dump_csv());
    }

    #[test]
    fn sketch_norm_is_unbiased() {
        // E ‖S(Ax−b)‖ₚᵖ = ‖Ax−b‖ₚᵖ, estimated over 10⁴ seeded sketches.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 20;
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = [0.3, -0.7, 0.2];
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
        for &p in &[1.0, 2.0] {
            let direct: f64 = (0..n)
                .map(|i| {
                    let pred: f64 = rows[i].iter().zip(&x).map(|(a, b)| a * b).sum();
                    (pred - labels[i]).abs().powf(p)
                })
                .sum();
            let trials = 10_000;
            let mut mean = 0.0;
            for seed in 0..trials {
                let (sketch, _, _) =
                    run_stream(p, &probs, &rows, labels.clone(), seed as u64, None);
                let mut acc = 0.0;
                for i in 0..sketch.len() {
                    let pred: f64 = sketch.rows().row(i).iter().zip(&x).map(|(a, b)| a * b).sum();
                    acc += (pred - sketch.labels().get(i)).abs().powf(p);
                }
                mean += acc;
            }
            mean /= trials as f64;
            assert!(
                (mean - direct).abs() <= 0.02 * direct,
                "p={p}: mean {mean} vs direct {direct}"
            );
        }
    }

    #[test]
    fn sampled_row_count_concentrates() {
        // Chernoff at desk scale: kept rows within [0.5, 2]·Σpᵢ in ≥95% of trials.
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let n = 400;
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.3)).collect();
        let expected: f64 = probs.iter().sum();
        let mut ok = 0;
        for seed in 0..100 {
            let (sketch, _, _) = run_stream(2.0, &probs, &rows, vec![0.0; n], seed, None);
            let k = sketch.len() as f64;
            if k >= 0.5 * expected && k <= 2.0 * expected {
                ok += 1;
            }
        }
        assert!(ok >= 95, "only {ok}/100 within bounds");
    }
}
