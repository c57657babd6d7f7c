//! Sharp regression discontinuity at the deferral cutoff.
//!
//! Each side of the cutoff gets a kernel-weighted local linear regression of
//! the correctness outcome on `k − cutoff`; the difference of the two
//! boundary intercepts estimates the effect of deferring for instances at
//! the cutoff. Records with `k == cutoff` belong to the right (deferred)
//! side. Standard errors come from the per-side heteroskedasticity-robust
//! sandwich; the bandwidth is common to both sides and chosen by
//! Ludwig-Miller cross-validation unless given.

use alloc::vec::Vec;

use thiserror::Error;

use crate::data::{outcome_view, EvaluationDataset};
use crate::effects::{EffectEstimate, EstimationError};

/// Minimum distinct abscissae with positive weight per fitted side.
pub const MIN_DISTINCT: usize = 3;
/// Minimum points per side for cross-validated bandwidth selection.
pub const MIN_CV_POINTS: usize = 10;
/// Number of candidate bandwidths `h_max·0.85^j`.
pub const CV_GRID_LEN: usize = 25;
/// Geometric step of the candidate grid.
pub const CV_GRID_RATIO: f64 = 0.85;

/// Errors from RD fitting and bandwidth selection.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RdError {
    /// Bandwidth not strictly positive and finite.
    #[error("bandwidth {0} must be positive and finite")]
    InvalidBandwidth(f64),
    /// A score or outcome is NaN or infinite.
    #[error("point {0} has a non-finite coordinate")]
    NonFinitePoint(usize),
    /// Too few distinct scores with positive kernel weight.
    #[error("{side:?} side has {distinct} distinct weighted score(s); {needed} required")]
    InsufficientSupport {
        /// Side that failed.
        side: Side,
        /// Distinct weighted scores found.
        distinct: usize,
        /// Distinct weighted scores required.
        needed: usize,
    },
    /// Weighted normal equations are numerically singular.
    #[error("{0:?} side: weighted normal equations are singular")]
    Singular(Side),
    /// Not enough points on a side for bandwidth selection.
    #[error("{side:?} side has {found} point(s); bandwidth selection needs {needed}")]
    TooFewPoints {
        /// Side that failed.
        side: Side,
        /// Points found.
        found: usize,
        /// Points required.
        needed: usize,
    },
    /// Every candidate bandwidth left some cross-validation fit unidentified.
    #[error("no candidate bandwidth supports every cross-validation fit")]
    NoValidBandwidth,
    /// Inference failed (invalid level).
    #[error(transparent)]
    Inference(#[from] EstimationError),
}

/// Side of the cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Side {
    /// `k < cutoff`: the model predicts.
    Left,
    /// `k >= cutoff`: deferred to the human.
    Right,
}

impl Side {
    fn contains(self, k: f64, cutoff: f64) -> bool {
        match self {
            Side::Left => k < cutoff,
            Side::Right => k >= cutoff,
        }
    }
}

/// Kernel shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Kernel {
    /// `max(0, 1 − d/h)`.
    #[default]
    Triangular,
    /// `1{d < h}`.
    Uniform,
}

impl Kernel {
    /// Weight at `distance >= 0` for bandwidth `h > 0`.
    #[inline]
    pub fn weight(self, distance: f64, h: f64) -> f64 {
        match self {
            Kernel::Triangular => (1.0 - distance / h).max(0.0),
            Kernel::Uniform => {
                if distance < h {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Triangular kernel weight `max(0, 1 − distance/h)`.
pub fn kernel_weight(distance: f64, h: f64) -> Result<f64, RdError> {
    check_bandwidth(h)?;
    Ok(Kernel::Triangular.weight(distance, h))
}

fn check_bandwidth(h: f64) -> Result<(), RdError> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(RdError::InvalidBandwidth(h))
    }
}

/// One side's local linear fit.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RdFit {
    /// Side fitted.
    pub side: Side,
    /// Estimated limit of `E[T | K = k]` as `k` approaches the cutoff.
    pub intercept: f64,
    /// Slope in `k − cutoff`.
    pub slope: f64,
    /// Robust sandwich variance of the intercept.
    pub intercept_variance: f64,
    /// Points with positive kernel weight.
    pub n_effective: usize,
    /// Bandwidth used.
    pub bandwidth: f64,
    /// Kernel used.
    pub kernel: Kernel,
}

/// How the bandwidth was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BandwidthMethod {
    /// Ludwig-Miller cross-validation.
    CrossValidation,
    /// Supplied by the caller.
    Manual,
}

/// Selected bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BandwidthChoice {
    /// Bandwidth.
    pub h: f64,
    /// Cross-validation criterion at `h` (absent for manual bandwidths).
    pub criterion_value: Option<f64>,
    /// Origin of `h`.
    pub method: BandwidthMethod,
}

/// RD estimate with its two side fits and bandwidth.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RdEstimate {
    /// Right intercept minus left intercept, with Wald inference.
    pub estimate: EffectEstimate,
    /// Model side.
    pub left: RdFit,
    /// Deferred side.
    pub right: RdFit,
    /// Bandwidth used by both sides.
    pub bandwidth: BandwidthChoice,
}

struct WeightedLine {
    intercept: f64,
    slope: f64,
    intercept_variance: f64,
    n_effective: usize,
}

/// Weighted least squares of `t` on `(1, x)`; `xs` must share the anchor
/// at which the intercept is read.
fn weighted_line(
    side: Side,
    obs: &[(f64, f64, f64)], // (x, t, w), w > 0
) -> Result<WeightedLine, RdError> {
    let distinct = count_distinct(obs.iter().map(|o| o.0));
    if distinct < MIN_DISTINCT {
        return Err(RdError::InsufficientSupport { side, distinct, needed: MIN_DISTINCT });
    }
    let s0: f64 = obs.iter().map(|o| o.2).sum();
    let x_bar = obs.iter().map(|o| o.2 * o.0).sum::<f64>() / s0;
    let t_bar = obs.iter().map(|o| o.2 * o.1).sum::<f64>() / s0;
    let (mut sxx, mut sxt, mut scale) = (0.0, 0.0, 0.0);
    for &(x, t, w) in obs {
        let dx = x - x_bar;
        sxx += w * dx * dx;
        sxt += w * dx * (t - t_bar);
        scale += w * x * x;
    }
    // Also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(sxx > 1e-12 * scale) {
        return Err(RdError::Singular(side));
    }
    let slope = sxt / sxx;
    let intercept = t_bar - slope * x_bar;
    // intercept = Σ a_i t_i, so the HC0 sandwich reduces to Σ a_i² e_i².
    let intercept_variance = obs
        .iter()
        .map(|&(x, t, w)| {
            let a = w * (1.0 / s0 - x_bar * (x - x_bar) / sxx);
            let e = t - intercept - slope * x;
            a * a * e * e
        })
        .sum();
    Ok(WeightedLine { intercept, slope, intercept_variance, n_effective: obs.len() })
}

fn count_distinct(xs: impl Iterator<Item = f64>) -> usize {
    let mut v: Vec<f64> = xs.collect();
    v.sort_unstable_by(f64::total_cmp);
    v.dedup();
    v.len()
}

fn check_points(points: &[(f64, f64)]) -> Result<(), RdError> {
    match points.iter().position(|(k, t)| !(k.is_finite() && t.is_finite())) {
        Some(i) => Err(RdError::NonFinitePoint(i)),
        None => Ok(()),
    }
}

/// Local linear fit on one side of `cutoff` with bandwidth `h`.
///
/// The intercept is the boundary estimate at the cutoff.
pub fn local_linear_fit(
    points: &[(f64, f64)],
    cutoff: f64,
    h: f64,
    side: Side,
    kernel: Kernel,
) -> Result<RdFit, RdError> {
    check_bandwidth(h)?;
    check_points(points)?;
    let obs: Vec<(f64, f64, f64)> = points
        .iter()
        .filter(|(k, _)| side.contains(*k, cutoff))
        .filter_map(|&(k, t)| {
            let x = k - cutoff;
            let w = kernel.weight(libm::fabs(x), h);
            (w > 0.0).then_some((x, t, w))
        })
        .collect();
    let line = weighted_line(side, &obs)?;
    Ok(RdFit {
        side,
        intercept: line.intercept,
        slope: line.slope,
        intercept_variance: line.intercept_variance,
        n_effective: line.n_effective,
        bandwidth: h,
        kernel,
    })
}

/// Points per block of precomputed cross-validation moments.
const CV_BLOCK: usize = 64;

/// Raw moments `Σ u^p` (p ≤ 3) and `Σ u^q t` (q ≤ 2) of a set of points,
/// with `u` the score measured from some centre.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    u: [f64; 4],
    ut: [f64; 3],
}

impl Moments {
    fn add(&mut self, u: f64, t: f64) {
        let u2 = u * u;
        self.u[0] += 1.0;
        self.u[1] += u;
        self.u[2] += u2;
        self.u[3] += u2 * u;
        self.ut[0] += t;
        self.ut[1] += u * t;
        self.ut[2] += u2 * t;
    }

    /// Moments of the same points about a centre moved so that `u' = u + d`.
    fn shifted(&self, d: f64) -> Moments {
        let [a0, a1, a2, a3] = self.u;
        let [b0, b1, b2] = self.ut;
        let d2 = d * d;
        Moments {
            u: [
                a0,
                a1 + d * a0,
                a2 + 2.0 * d * a1 + d2 * a0,
                a3 + 3.0 * d * a2 + 3.0 * d2 * a1 + d2 * d * a0,
            ],
            ut: [b0, b1 + d * b0, b2 + 2.0 * d * b1 + d2 * b0],
        }
    }

    fn merge(&mut self, other: &Moments) {
        self.u.iter_mut().zip(&other.u).for_each(|(a, b)| *a += b);
        self.ut.iter_mut().zip(&other.ut).for_each(|(a, b)| *a += b);
    }
}

/// Sorted scores and outcomes of one side, with per-block moments (each
/// about the block's first score) and a running count of distinct scores.
struct SortedSide {
    k: Vec<f64>,
    t: Vec<f64>,
    blocks: Vec<(f64, Moments)>,
    /// `new_values[j]` counts `i < j` with `k[i] != k[i - 1]`, `i ≥ 1`.
    new_values: Vec<usize>,
}

impl SortedSide {
    fn new(points: &[(f64, f64)], cutoff: f64, side: Side) -> Self {
        let mut pts: Vec<(f64, f64)> =
            points.iter().copied().filter(|(k, _)| side.contains(*k, cutoff)).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let k: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let t: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let blocks = k
            .chunks_exact(CV_BLOCK)
            .zip(t.chunks_exact(CV_BLOCK))
            .map(|(kb, tb)| {
                let mut m = Moments::default();
                kb.iter().zip(tb).for_each(|(&k, &t)| m.add(k - kb[0], t));
                (kb[0], m)
            })
            .collect();
        let mut new_values = Vec::with_capacity(k.len() + 1);
        let mut count = 0;
        new_values.push(0);
        for i in 0..k.len() {
            if i > 0 && k[i] != k[i - 1] {
                count += 1;
            }
            new_values.push(count);
        }
        SortedSide { k, t, blocks, new_values }
    }

    fn distinct(&self, lo: usize, hi: usize) -> usize {
        if hi <= lo {
            0
        } else {
            1 + self.new_values[hi] - self.new_values[lo + 1]
        }
    }

    /// Moments of `lo..hi` about `anchor`.
    fn window(&self, lo: usize, hi: usize, anchor: f64) -> Moments {
        let mut m = Moments::default();
        let first = lo.div_ceil(CV_BLOCK);
        let last = hi / CV_BLOCK;
        if first >= last {
            (lo..hi).for_each(|j| m.add(self.k[j] - anchor, self.t[j]));
            return m;
        }
        (lo..first * CV_BLOCK).for_each(|j| m.add(self.k[j] - anchor, self.t[j]));
        for (centre, block) in &self.blocks[first..last] {
            m.merge(&block.shifted(centre - anchor));
        }
        (last * CV_BLOCK..hi).for_each(|j| m.add(self.k[j] - anchor, self.t[j]));
        m
    }
}

/// Boundary prediction at `anchor` from the points `lo..hi` of `side`, all
/// strictly on the `which` side of `anchor` and within `h` of it. `None`
/// when the fit is unidentified.
fn cv_predict(
    side: &SortedSide,
    lo: usize,
    hi: usize,
    anchor: f64,
    h: f64,
    which: Side,
    kernel: Kernel,
) -> Option<f64> {
    if side.distinct(lo, hi) < MIN_DISTINCT {
        return None;
    }
    let m = side.window(lo, hi, anchor);
    // Triangular weight 1 - |u|/h, with |u| = u on the right and -u on the left.
    let c = match (kernel, which) {
        (Kernel::Uniform, _) => 0.0,
        (Kernel::Triangular, Side::Right) => 1.0 / h,
        (Kernel::Triangular, Side::Left) => -1.0 / h,
    };
    let s0 = m.u[0] - c * m.u[1];
    let s1 = m.u[1] - c * m.u[2];
    let s2 = m.u[2] - c * m.u[3];
    let t0 = m.ut[0] - c * m.ut[1];
    let t1 = m.ut[1] - c * m.ut[2];
    let det = s0 * s2 - s1 * s1;
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(det > 1e-12 * s0 * s2) {
        return None;
    }
    Some((s2 * t0 - s1 * t1) / det)
}

/// Leave-one-out boundary prediction error of one side for bandwidth `h`.
///
/// Targets are the half of the side nearest the cutoff; each is predicted
/// from the points strictly beyond it (away from the cutoff) within `h`.
fn cv_side_error(side: &SortedSide, which: Side, h: f64, kernel: Kernel) -> Option<f64> {
    let n = side.k.len();
    let half = n / 2;
    let targets = match which {
        Side::Left => n - half..n,
        Side::Right => 0..half,
    };
    let mut total = 0.0;
    for i in targets {
        let ki = side.k[i];
        let (lo, hi) = match which {
            Side::Left => (side.k.partition_point(|&k| k <= ki - h), side.k.partition_point(|&k| k < ki)),
            Side::Right => (side.k.partition_point(|&k| k <= ki), side.k.partition_point(|&k| k < ki + h)),
        };
        let pred = cv_predict(side, lo, hi, ki, h, which, kernel)?;
        let e = side.t[i] - pred;
        total += e * e;
    }
    Some(total)
}

/// Candidate bandwidths `h_max·0.85^j`, `j = 0..25`, largest first.
pub fn bandwidth_grid(h_max: f64) -> impl Iterator<Item = f64> {
    (0..CV_GRID_LEN as i32).map(move |j| h_max * libm::pow(CV_GRID_RATIO, f64::from(j)))
}

/// Ludwig-Miller cross-validated common bandwidth.
///
/// Candidates whose cross-validation fits are not all identified are
/// skipped. Among the rest the smallest total squared error wins; ties (up
/// to `1e-10` of the targets' total squared outcome) go to the larger
/// bandwidth.
pub fn select_bandwidth(
    points: &[(f64, f64)],
    cutoff: f64,
    kernel: Kernel,
) -> Result<BandwidthChoice, RdError> {
    check_points(points)?;
    let left = SortedSide::new(points, cutoff, Side::Left);
    let right = SortedSide::new(points, cutoff, Side::Right);
    for (side, s) in [(Side::Left, &left), (Side::Right, &right)] {
        if s.k.len() < MIN_CV_POINTS {
            return Err(RdError::TooFewPoints { side, found: s.k.len(), needed: MIN_CV_POINTS });
        }
    }
    let h_max = points.iter().map(|(k, _)| libm::fabs(k - cutoff)).fold(0.0, f64::max);

    let target_ss = |s: &SortedSide, which: Side| -> f64 {
        let half = s.t.len() / 2;
        let range = match which {
            Side::Left => s.t.len() - half..s.t.len(),
            Side::Right => 0..half,
        };
        s.t[range].iter().map(|t| t * t).sum()
    };
    let tol = 1e-10 * (target_ss(&left, Side::Left) + target_ss(&right, Side::Right));

    let mut best: Option<(f64, f64)> = None;
    for h in bandwidth_grid(h_max) {
        let Some(l) = cv_side_error(&left, Side::Left, h, kernel) else { continue };
        let Some(r) = cv_side_error(&right, Side::Right, h, kernel) else { continue };
        let crit = l + r;
        match best {
            Some((_, b)) if crit >= b - tol => {}
            _ => best = Some((h, crit)),
        }
    }
    let (h, crit) = best.ok_or(RdError::NoValidBandwidth)?;
    Ok(BandwidthChoice { h, criterion_value: Some(crit), method: BandwidthMethod::CrossValidation })
}

/// RD estimate from raw `(score, outcome)` points.
///
/// `h = None` selects the bandwidth by cross-validation.
pub fn estimate_rd_points(
    points: &[(f64, f64)],
    cutoff: f64,
    h: Option<f64>,
    kernel: Kernel,
    level: f64,
) -> Result<RdEstimate, RdError> {
    let bandwidth = match h {
        Some(h) => {
            check_bandwidth(h)?;
            BandwidthChoice { h, criterion_value: None, method: BandwidthMethod::Manual }
        }
        None => select_bandwidth(points, cutoff, kernel)?,
    };
    let left = local_linear_fit(points, cutoff, bandwidth.h, Side::Left, kernel)?;
    let right = local_linear_fit(points, cutoff, bandwidth.h, Side::Right, kernel)?;
    let point = right.intercept - left.intercept;
    let se = libm::sqrt(left.intercept_variance + right.intercept_variance);
    let estimate = EffectEstimate::from_point(point, se, level, left.n_effective + right.n_effective, "rd")?;
    Ok(RdEstimate { estimate, left, right, bandwidth })
}

/// `(reject score, correctness of the active predictor)` pairs.
pub fn rd_points(ds: &EvaluationDataset) -> Vec<(f64, f64)> {
    ds.records()
        .iter()
        .zip(outcome_view(ds))
        .map(|(r, v)| (r.reject_score, if v.t { 1.0 } else { 0.0 }))
        .collect()
}

/// RD estimate of the effect of deferring at `cutoff`, using only the
/// active predictor's correctness.
pub fn estimate_rd(
    ds: &EvaluationDataset,
    cutoff: f64,
    h: Option<f64>,
    kernel: Kernel,
    level: f64,
) -> Result<RdEstimate, RdError> {
    estimate_rd_points(&rd_points(ds), cutoff, h, kernel, level)
}
