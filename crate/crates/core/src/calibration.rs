//! Coverage calibration of the deferral cutoff.
//!
//! For a target coverage `c` (fraction of instances left to the model) the
//! cutoff is the lower order statistic `s[floor(c·n)]` of the sorted
//! validation scores; instances with `score >= cutoff` are deferred. `c = 1`
//! maps to an infinite cutoff that defers nothing.

use alloc::vec::Vec;

use thiserror::Error;

use crate::data::{floor_count, DataError, EvaluationDataset};

/// Errors from cutoff estimation and policy application.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    /// No validation scores.
    #[error("no validation scores")]
    EmptyScores,
    /// A validation score is NaN or infinite.
    #[error("validation score at index {index} is not finite")]
    NonFiniteScore {
        /// Position in the input.
        index: usize,
    },
    /// Target coverage outside [0, 1].
    #[error("target coverage {0} is outside [0, 1]")]
    CoverageOutOfRange(f64),
    /// Re-flagging left a record without the prediction its new flag needs.
    #[error("applying the cutoff orphans a record: {0}")]
    Orphaned(#[from] DataError),
}

/// A calibrated deferral cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Cutoff {
    /// Threshold on the reject score; `+∞` means nothing is deferred.
    pub value: f64,
    /// Requested coverage.
    pub target_coverage: f64,
    /// Fraction of validation scores strictly below `value`.
    pub achieved_coverage: f64,
}

impl Cutoff {
    /// True for the `c = 1` marker that defers nothing.
    pub fn is_infinite(&self) -> bool {
        self.value == f64::INFINITY
    }

    /// Deferral rule `score >= value`.
    pub fn defers(&self, score: f64) -> bool {
        score >= self.value
    }
}

fn sorted_scores(scores: &[f64]) -> Result<Vec<f64>, CalibrationError> {
    if scores.is_empty() {
        return Err(CalibrationError::EmptyScores);
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(CalibrationError::NonFiniteScore { index });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(sorted)
}

fn check_coverage(c: f64) -> Result<(), CalibrationError> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(CalibrationError::CoverageOutOfRange(c))
    }
}

fn cutoff_from_sorted(sorted: &[f64], c: f64) -> Cutoff {
    let n = sorted.len();
    let value = if c >= 1.0 { f64::INFINITY } else { sorted[floor_count(c, n).min(n - 1)] };
    let below = sorted.partition_point(|&s| s < value);
    Cutoff { value, target_coverage: c, achieved_coverage: below as f64 / n as f64 }
}

/// Cutoff achieving coverage `c` on `val_scores`.
pub fn estimate_cutoff(val_scores: &[f64], c: f64) -> Result<Cutoff, CalibrationError> {
    check_coverage(c)?;
    let sorted = sorted_scores(val_scores)?;
    Ok(cutoff_from_sorted(&sorted, c))
}

/// One cutoff per target coverage, in input order. Sorts once.
pub fn coverage_grid(val_scores: &[f64], cs: &[f64]) -> Result<Vec<Cutoff>, CalibrationError> {
    if cs.is_empty() {
        return Ok(Vec::new());
    }
    for &c in cs {
        check_coverage(c)?;
    }
    let sorted = sorted_scores(val_scores)?;
    Ok(cs.iter().map(|&c| cutoff_from_sorted(&sorted, c)).collect())
}

/// Copy of `ds` with `deferred := reject_score >= cutoff.value`.
pub fn apply_policy(ds: &EvaluationDataset, cutoff: &Cutoff) -> Result<EvaluationDataset, CalibrationError> {
    let records = ds
        .records()
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.deferred = cutoff.defers(r.reject_score);
            r
        })
        .collect();
    Ok(ds.with_records(records)?)
}
