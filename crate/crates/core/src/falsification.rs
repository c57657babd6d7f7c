//! Falsification battery for the continuity assumption behind the RD
//! estimate: placebo cutoffs, placebo outcomes and a density (count
//! balance) test at the cutoff.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution};
use thiserror::Error;

use crate::calibration::estimate_cutoff;
use crate::data::EvaluationDataset;
use crate::rd::{estimate_rd_points, rd_points, Kernel, RdError, RdEstimate, Side};
use crate::stats::binomial_half_two_sided;

/// Minimum scores per side for placebo cutoffs.
pub const MIN_PLACEBO_SIDE: usize = 4;
/// Histogram bins on each side of the cutoff.
pub const DENSITY_BINS_PER_SIDE: usize = 10;

/// Errors raised by the falsification tests.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FalsificationError {
    /// Not enough scores on one side of the cutoff.
    #[error("{side:?} side has {found} score(s); {needed} required")]
    InsufficientPoints {
        /// Side that failed.
        side: Side,
        /// Scores found.
        found: usize,
        /// Scores required.
        needed: usize,
    },
    /// Placebo probability outside [0, 1].
    #[error("placebo probability {0} is outside [0, 1]")]
    InvalidProbability(f64),
    /// Density window not positive and finite.
    #[error("density window {0} must be positive and finite")]
    InvalidWindow(f64),
    /// No scores fall inside the density window.
    #[error("no scores inside the density window")]
    EmptyWindow,
    /// A score is NaN or infinite.
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    /// The underlying RD estimation failed.
    #[error(transparent)]
    Rd(#[from] RdError),
}

/// Fake cutoffs inside each true side.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlaceboCutoffs {
    /// 0.75-quantile of the scores below the cutoff.
    pub kappa_low: f64,
    /// 0.25-quantile of the scores at or above the cutoff.
    pub kappa_high: f64,
}

fn check_scores(scores: &[f64]) -> Result<(), FalsificationError> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(FalsificationError::NonFiniteScore(i)),
        None => Ok(()),
    }
}

/// Placebo cutoffs from the same lower-order-statistic quantile rule as
/// cutoff calibration, applied to each side's scores.
pub fn placebo_cutoffs(scores: &[f64], cutoff: f64) -> Result<PlaceboCutoffs, FalsificationError> {
    check_scores(scores)?;
    let (below, above): (Vec<f64>, Vec<f64>) = scores.iter().partition(|&&s| s < cutoff);
    for (side, part) in [(Side::Left, &below), (Side::Right, &above)] {
        if part.len() < MIN_PLACEBO_SIDE {
            return Err(FalsificationError::InsufficientPoints {
                side,
                found: part.len(),
                needed: MIN_PLACEBO_SIDE,
            });
        }
    }
    // Non-empty and finite, so calibration cannot fail.
    let quantile = |part: &[f64], c: f64| estimate_cutoff(part, c).map(|cut| cut.value).unwrap_or(f64::NAN);
    Ok(PlaceboCutoffs { kappa_low: quantile(&below, 0.75), kappa_high: quantile(&above, 0.25) })
}

/// RD estimates at both placebo cutoffs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaceboCutoffTest {
    /// Placebo cutoff locations.
    pub cutoffs: PlaceboCutoffs,
    /// Estimate at `kappa_low` using only scores below the true cutoff.
    pub low: Result<RdEstimate, RdError>,
    /// Estimate at `kappa_high` using only scores at or above the true cutoff.
    pub high: Result<RdEstimate, RdError>,
}

/// Placebo-cutoff test on raw `(score, outcome)` points.
///
/// Each placebo RD uses only the points on one side of the true cutoff, so
/// no real change of treatment crosses the placebo point.
pub fn placebo_cutoff_test_points(
    points: &[(f64, f64)],
    cutoff: f64,
    h: Option<f64>,
    kernel: Kernel,
    level: f64,
) -> Result<PlaceboCutoffTest, FalsificationError> {
    let scores: Vec<f64> = points.iter().map(|p| p.0).collect();
    let cutoffs = placebo_cutoffs(&scores, cutoff)?;
    let (below, above): (Vec<_>, Vec<_>) = points.iter().partition(|p| p.0 < cutoff);
    Ok(PlaceboCutoffTest {
        cutoffs,
        low: estimate_rd_points(&below, cutoffs.kappa_low, h, kernel, level),
        high: estimate_rd_points(&above, cutoffs.kappa_high, h, kernel, level),
    })
}

/// Placebo-cutoff test on a dataset's active-predictor outcomes.
pub fn placebo_cutoff_test(
    ds: &EvaluationDataset,
    cutoff: f64,
    h: Option<f64>,
    kernel: Kernel,
    level: f64,
) -> Result<PlaceboCutoffTest, FalsificationError> {
    placebo_cutoff_test_points(&rd_points(ds), cutoff, h, kernel, level)
}

/// Replace every outcome with an independent `Bernoulli(p)` draw from a
/// ChaCha8 stream seeded with `seed`, in score order as given.
pub fn placebo_outcomes(scores: &[f64], p: f64, seed: u64) -> Result<Vec<(f64, f64)>, FalsificationError> {
    let coin = Bernoulli::new(p).map_err(|_| FalsificationError::InvalidProbability(p))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(scores.iter().map(|&k| (k, if coin.sample(&mut rng) { 1.0 } else { 0.0 })).collect())
}

/// RD at the true cutoff on a placebo outcome whose true effect is zero.
pub fn placebo_outcome_test(
    ds: &EvaluationDataset,
    cutoff: f64,
    p: f64,
    seed: u64,
    h: Option<f64>,
    kernel: Kernel,
    level: f64,
) -> Result<RdEstimate, FalsificationError> {
    let points = placebo_outcomes(&ds.scores(), p, seed)?;
    Ok(estimate_rd_points(&points, cutoff, h, kernel, level)?)
}

/// One histogram bin of the density test.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HistogramBin {
    /// Lower edge.
    pub low: f64,
    /// Upper edge.
    pub high: f64,
    /// Scores in the bin.
    pub count: usize,
    /// Side of the cutoff the bin lies on.
    pub side: Side,
}

/// Outcome of [`density_test`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DensityTestResult {
    /// Half-width of the window around the cutoff.
    pub window: f64,
    /// Scores in `[cutoff − window, cutoff)`.
    pub n_left: usize,
    /// Scores in `[cutoff, cutoff + window]`.
    pub n_right: usize,
    /// Exact two-sided binomial p-value for equal mass on both sides.
    pub p_value: f64,
    /// Ten bins per side partitioning the window.
    pub histogram: Vec<HistogramBin>,
}

/// Count-balance test for a density discontinuity at `cutoff`.
///
/// Under a continuous score density, the counts just left and right of the
/// cutoff split as `Binomial(n_left + n_right, 1/2)`. The window defaults to
/// 10% of the score range.
pub fn density_test(
    scores: &[f64],
    cutoff: f64,
    window: Option<f64>,
) -> Result<DensityTestResult, FalsificationError> {
    check_scores(scores)?;
    let window = match window {
        Some(w) => w,
        None => {
            let (lo, hi) =
                scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
            0.1 * (hi - lo)
        }
    };
    if !(window > 0.0 && window.is_finite()) {
        return Err(FalsificationError::InvalidWindow(window));
    }
    let (lo, hi) = (cutoff - window, cutoff + window);
    let bin_width = window / DENSITY_BINS_PER_SIDE as f64;
    let mut left = [0usize; DENSITY_BINS_PER_SIDE];
    let mut right = [0usize; DENSITY_BINS_PER_SIDE];
    let bin = |offset: f64| ((offset / bin_width) as usize).min(DENSITY_BINS_PER_SIDE - 1);
    for &s in scores {
        if s >= lo && s < cutoff {
            left[bin(s - lo)] += 1;
        } else if s >= cutoff && s <= hi {
            right[bin(s - cutoff)] += 1;
        }
    }
    let n_left: usize = left.iter().sum();
    let n_right: usize = right.iter().sum();
    if n_left + n_right == 0 {
        return Err(FalsificationError::EmptyWindow);
    }
    let edge = |origin: f64, i: usize| origin + bin_width * i as f64;
    let histogram = left
        .iter()
        .enumerate()
        .map(|(i, &count)| HistogramBin {
            low: edge(lo, i),
            high: if i + 1 == DENSITY_BINS_PER_SIDE { cutoff } else { edge(lo, i + 1) },
            count,
            side: Side::Left,
        })
        .chain(right.iter().enumerate().map(|(i, &count)| HistogramBin {
            low: edge(cutoff, i),
            high: if i + 1 == DENSITY_BINS_PER_SIDE { hi } else { edge(cutoff, i + 1) },
            count,
            side: Side::Right,
        }))
        .collect();
    Ok(DensityTestResult {
        window,
        n_left,
        n_right,
        p_value: binomial_half_two_sided(n_right as u64, (n_left + n_right) as u64),
        histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::{binary, record};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn placebo_cutoff_quantiles() {
        let scores: Vec<f64> = (1..=12).rev().map(f64::from).collect();
        let pc = placebo_cutoffs(&scores, 9.0).unwrap();
        assert_eq!((pc.kappa_low, pc.kappa_high), (7.0, 10.0));

        let mut ties = vec![3.0; 6];
        ties.extend([9.0, 10.0, 11.0, 12.0]);
        assert_eq!(placebo_cutoffs(&ties, 9.0).unwrap().kappa_low, 3.0);

        assert_eq!(
            placebo_cutoffs(&[1.0, 2.0, 3.0, 9.0, 10.0, 11.0, 12.0], 9.0),
            Err(FalsificationError::InsufficientPoints { side: Side::Left, found: 3, needed: 4 })
        );
    }

    #[test]
    fn placebo_cutoffs_match_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<f64> = (0..997).map(|_| rng.random::<f64>()).collect();
        let mut below: Vec<f64> = scores.iter().copied().filter(|&s| s < 0.4).collect();
        let mut above: Vec<f64> = scores.iter().copied().filter(|&s| s >= 0.4).collect();
        below.sort_by(|a, b| a.partial_cmp(b).unwrap());
        above.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pc = placebo_cutoffs(&scores, 0.4).unwrap();
        assert_eq!(pc.kappa_low, below[below.len() * 3 / 4]);
        assert_eq!(pc.kappa_high, above[above.len() / 4]);
        assert!(pc.kappa_low < 0.4 && 0.4 <= pc.kappa_high);
    }

    #[test]
    fn constant_sides_give_zero_placebo_effects() {
        let points: Vec<(f64, f64)> = (0..200)
            .map(|i| -1.0 + i as f64 / 100.0 + 0.003)
            .map(|k| (k, if k >= 0.0 { 1.0 } else { 0.0 }))
            .collect();
        let test = placebo_cutoff_test_points(&points, 0.0, None, Kernel::Triangular, 0.95).unwrap();
        assert!(test.low.unwrap().estimate.point.abs() < 1e-9);
        assert!(test.high.unwrap().estimate.point.abs() < 1e-9);
    }

    fn spread_dataset(n: usize) -> EvaluationDataset {
        let records = (0..n)
            .map(|i| {
                let k = -1.0 + 2.0 * i as f64 / n as f64 + 1e-4;
                let deferred = k >= 0.0;
                record(k, deferred, Some("0"), Some("1"), if i % 3 == 0 { "0" } else { "1" })
            })
            .collect();
        EvaluationDataset::new(records, binary()).unwrap()
    }

    #[test]
    fn degenerate_placebo_outcomes() {
        let ds = spread_dataset(200);
        for p in [0.0, 1.0] {
            let est = placebo_outcome_test(&ds, 0.0, p, 5, None, Kernel::Triangular, 0.95).unwrap();
            assert_eq!(est.estimate.point, 0.0);
            assert_eq!(est.estimate.se, 0.0);
            assert_eq!(est.estimate.p_value, 1.0);
        }
        assert_eq!(
            placebo_outcome_test(&ds, 0.0, 1.5, 5, None, Kernel::Triangular, 0.95),
            Err(FalsificationError::InvalidProbability(1.5))
        );
    }

    #[test]
    fn placebo_draws_are_seeded() {
        let scores: Vec<f64> = (0..100).map(f64::from).collect();
        assert_eq!(placebo_outcomes(&scores, 0.5, 3).unwrap(), placebo_outcomes(&scores, 0.5, 3).unwrap());
        assert_ne!(placebo_outcomes(&scores, 0.5, 3).unwrap(), placebo_outcomes(&scores, 0.5, 4).unwrap());
    }

    #[test]
    fn density_counts_and_p_values() {
        let mut scores: Vec<f64> = (0..10).map(|i| -0.05 - 0.01 * i as f64).collect();
        scores.extend((0..10).map(|i| 0.01 * i as f64));
        let r = density_test(&scores, 0.0, Some(0.2)).unwrap();
        assert_eq!((r.n_left, r.n_right, r.p_value), (10, 10, 1.0));

        let scores: Vec<f64> = (0..20).map(|i| 0.01 * i as f64).collect();
        let r = density_test(&scores, 0.0, Some(0.5)).unwrap();
        assert_eq!((r.n_left, r.n_right), (0, 20));
        assert_relative_eq!(r.p_value, 1.9073486328125e-6, max_relative = 1e-10);

        assert_eq!(density_test(&[5.0], 0.0, Some(1.0)), Err(FalsificationError::EmptyWindow));
        assert_eq!(density_test(&[5.0], 0.0, Some(0.0)), Err(FalsificationError::InvalidWindow(0.0)));
    }

    #[test]
    fn density_histogram_partitions_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        let r = density_test(&scores, 0.5, None).unwrap();
        assert_eq!(r.histogram.len(), 2 * DENSITY_BINS_PER_SIDE);
        assert_relative_eq!(r.histogram[0].low, 0.5 - r.window);
        assert_eq!(r.histogram[DENSITY_BINS_PER_SIDE - 1].high, 0.5);
        assert_eq!(r.histogram[DENSITY_BINS_PER_SIDE].low, 0.5);
        assert_relative_eq!(r.histogram.last().unwrap().high, 0.5 + r.window);
        for w in r.histogram.windows(2) {
            assert_relative_eq!(w[0].high, w[1].low, max_relative = 1e-12);
        }
        let total: usize = r.histogram.iter().map(|b| b.count).sum();
        assert_eq!(total, r.n_left + r.n_right);
        let left: usize = r.histogram.iter().filter(|b| b.side == Side::Left).map(|b| b.count).sum();
        assert_eq!(left, r.n_left);
    }

    #[test]
    fn density_symmetric_under_reflection() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..300).map(|_| rng.random::<f64>() - 0.3).collect();
            let mirrored: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = density_test(&scores, 0.0, Some(0.2)).unwrap();
            let b = density_test(&mirrored, 0.0, Some(0.2)).unwrap();
            assert_eq!((a.n_left, a.n_right), (b.n_right, b.n_left));
            assert_eq!(a.p_value, b.p_value);
        }
    }
}
