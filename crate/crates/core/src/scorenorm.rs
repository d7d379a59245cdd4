//! Adaptive symmetric score normalization against an unlabeled cohort.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::backend::PldaScorer;
use crate::error::{Error, Result};

pub const DEFAULT_TOP_K: usize = 200;

/// Spread below which a cohort is considered degenerate.
pub const MIN_COHORT_STD: f64 = 1e-12;

pub fn default_top_k(cohort_size: usize) -> usize {
    DEFAULT_TOP_K.min(cohort_size)
}

/// Entry `(i, j)` is the PLDA score of `targets[i]` against `cohort[j]`.
pub fn cohort_score_matrix(scorer: &PldaScorer, targets: &[DVector<f64>], cohort: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    if cohort.is_empty() {
        return Err(Error::EmptyInput("cohort is empty".into()));
    }
    let rows: Vec<Vec<f64>> = targets
        .par_iter()
        .map(|t| cohort.iter().map(|c| scorer.score(t, c)).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(targets.len(), cohort.len(), |i, j| rows[i][j]))
}

/// Mean and unbiased standard deviation of the `k` largest cohort scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
    /// Number of scores used; exceeds `k` when scores tie at the cut.
    pub count: usize,
}

impl CohortStats {
    /// Scores tied with the `k`-th largest are all included, so the result
    /// depends only on the multiset of scores.
    pub fn top_k(scores: &[f64], k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("top-K must be at least 2, got {k}")));
        }
        if k > scores.len() {
            return Err(Error::InvalidInput(format!(
                "top-K {k} exceeds cohort size {}",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("non-finite cohort score".into()));
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cut = sorted[k - 1];
        let count = k + sorted[k..].iter().take_while(|&&s| s == cut).count();
        let top = &sorted[..count];
        let n = count as f64;
        let mean = top.iter().sum::<f64>() / n;
        let var = top.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            mean,
            std: var.sqrt(),
            count,
        })
    }
}

/// `½ ((raw − μ_e)/σ_e + (raw − μ_t)/σ_t)` with top-K statistics of each side.
pub fn asnorm(raw: f64, enroll_cohort: &[f64], test_cohort: &[f64], k: usize) -> Result<f64> {
    let e = CohortStats::top_k(enroll_cohort, k)?;
    let t = CohortStats::top_k(test_cohort, k)?;
    asnorm_with(raw, &e, &t)
}

pub fn asnorm_with(raw: f64, e: &CohortStats, t: &CohortStats) -> Result<f64> {
    for (side, s) in [("enrollment", e), ("test", t)] {
        if !(s.std >= MIN_COHORT_STD) {
            return Err(Error::DegenerateCohort(format!(
                "{side}-side top-{} cohort scores have standard deviation {:.3e}",
                s.count, s.std
            )));
        }
    }
    Ok(0.5 * ((raw - e.mean) / e.std + (raw - t.mean) / t.std))
}
