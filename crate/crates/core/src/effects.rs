//! Effects identified when model predictions are logged for deferred
//! instances: individual effects, ATD, CATD, the accuracy-difference
//! identity and its reweighting, and Wald inference shared with the RD
//! estimator.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::data::{DataError, EvaluationDataset, EvaluationRecord, OutcomeView, Scenario};
use crate::stats::{mean_and_sd, normal_quantile, normal_two_sided_p};

/// Errors raised by the Scenario-1 estimators and by [`wald_inference`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimationError {
    /// The dataset does not support the requested scenario.
    #[error(transparent)]
    Data(#[from] DataError),
    /// Not enough deferred records for the estimator.
    #[error("{found} deferred record(s); at least {needed} required")]
    TooFewDeferred {
        /// Deferred records available.
        found: usize,
        /// Deferred records required.
        needed: usize,
    },
    /// The grouping attribute does not exist.
    #[error("unknown group attribute {0:?}")]
    UnknownAttribute(String),
    /// The grouping attribute is absent on some record.
    #[error("row {row}: group attribute {attr:?} is missing")]
    MissingGroupValue {
        /// Attribute name.
        attr: String,
        /// Zero-based record index.
        row: usize,
    },
    /// Confidence level outside (0, 1).
    #[error("confidence level {0} must lie in (0, 1)")]
    InvalidLevel(f64),
    /// Negative or non-finite standard error.
    #[error("standard error {0} must be finite and non-negative")]
    InvalidStandardError(f64),
    /// The aggregate counts passed to [`reweight_tau_delta`] are inconsistent.
    #[error("invalid counts: n = {n}, n1 = {n1}")]
    InvalidCounts {
        /// Total records.
        n: usize,
        /// Deferred records.
        n1: usize,
    },
}

/// Point estimate with Wald inference.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EffectEstimate {
    /// Point estimate.
    pub point: f64,
    /// Standard error.
    pub se: f64,
    /// Lower confidence bound.
    pub ci_low: f64,
    /// Upper confidence bound.
    pub ci_high: f64,
    /// Two-sided p-value for a zero effect.
    pub p_value: f64,
    /// Records the estimate is based on.
    pub n_used: usize,
    /// Estimator tag, e.g. `"atd"` or `"rd"`.
    pub method: String,
}

impl EffectEstimate {
    /// Assemble an estimate from a point and standard error.
    pub fn from_point(
        point: f64,
        se: f64,
        level: f64,
        n_used: usize,
        method: &str,
    ) -> Result<Self, EstimationError> {
        let w = wald_inference(point, se, level)?;
        Ok(EffectEstimate {
            point,
            se,
            ci_low: w.ci_low,
            ci_high: w.ci_high,
            p_value: w.p_value,
            n_used,
            method: method.to_string(),
        })
    }
}

/// Confidence interval and p-value of a normal-approximation test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldInterval {
    /// Lower bound.
    pub ci_low: f64,
    /// Upper bound.
    pub ci_high: f64,
    /// Two-sided p-value.
    pub p_value: f64,
}

/// Normal-approximation interval and p-value for `point` with standard
/// error `se` at confidence `level`.
///
/// A zero standard error gives a degenerate interval at `point` and a
/// p-value of 1 if `point` is zero, else 0.
pub fn wald_inference(point: f64, se: f64, level: f64) -> Result<WaldInterval, EstimationError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(EstimationError::InvalidLevel(level));
    }
    if !(se >= 0.0 && se.is_finite()) {
        return Err(EstimationError::InvalidStandardError(se));
    }
    if se == 0.0 {
        let p_value = if point == 0.0 { 1.0 } else { 0.0 };
        return Ok(WaldInterval { ci_low: point, ci_high: point, p_value });
    }
    let z_star = normal_quantile(1.0 - (1.0 - level) / 2.0);
    let half = z_star * se;
    Ok(WaldInterval { ci_low: point - half, ci_high: point + half, p_value: normal_two_sided_p(point / se) })
}

fn effect_of(record: &EvaluationRecord) -> i8 {
    let v = OutcomeView::of(record);
    // Both predictions exist under Scenario 1.
    i8::from(v.t1.unwrap_or(false)) - i8::from(v.t0.unwrap_or(false))
}

/// Individual effects `1{h = y} − 1{f = y}` of the deferred records, in
/// record order.
pub fn individual_effects(ds: &EvaluationDataset) -> Result<Vec<i8>, EstimationError> {
    Scenario::S1.check(ds)?;
    let effects: Vec<i8> = ds.records().iter().filter(|r| r.deferred).map(effect_of).collect();
    if effects.is_empty() {
        return Err(EstimationError::TooFewDeferred { found: 0, needed: 1 });
    }
    Ok(effects)
}

fn paired_estimate<'a>(
    deferred: impl Iterator<Item = &'a EvaluationRecord>,
    level: f64,
    method: &str,
) -> Result<EffectEstimate, EstimationError> {
    let diffs: Vec<f64> = deferred.map(|r| f64::from(effect_of(r))).collect();
    let n1 = diffs.len();
    let (mean, sd) = mean_and_sd(&diffs).ok_or(EstimationError::TooFewDeferred { found: n1, needed: 2 })?;
    EffectEstimate::from_point(mean, sd / libm::sqrt(n1 as f64), level, n1, method)
}

/// Average treatment effect on the deferred: mean paired difference over
/// deferred records with standard error `sd / √n1`.
pub fn estimate_atd(ds: &EvaluationDataset, level: f64) -> Result<EffectEstimate, EstimationError> {
    Scenario::S1.check(ds)?;
    paired_estimate(ds.records().iter().filter(|r| r.deferred), level, "atd")
}

/// Per-category result of [`estimate_catd`].
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "status", rename_all = "snake_case"))]
pub enum CatdEntry {
    /// At least two deferred records: full estimate.
    Estimated(EffectEstimate),
    /// Fewer than two deferred records.
    Unavailable {
        /// Deferred records in the category.
        n_deferred: usize,
        /// Mean effect when exactly one deferred record exists.
        point: Option<f64>,
    },
}

impl CatdEntry {
    /// Deferred records in the category.
    pub fn n_deferred(&self) -> usize {
        match self {
            CatdEntry::Estimated(e) => e.n_used,
            CatdEntry::Unavailable { n_deferred, .. } => *n_deferred,
        }
    }

    /// Point estimate, if any deferred record exists.
    pub fn point(&self) -> Option<f64> {
        match self {
            CatdEntry::Estimated(e) => Some(e.point),
            CatdEntry::Unavailable { point, .. } => *point,
        }
    }
}

/// ATD conditional on each category of `group_attr`.
///
/// Every category seen on any record gets an entry; categories with fewer
/// than two deferred records are reported as unavailable.
pub fn estimate_catd(
    ds: &EvaluationDataset,
    group_attr: &str,
    level: f64,
) -> Result<BTreeMap<String, CatdEntry>, EstimationError> {
    Scenario::S1.check(ds)?;
    if !ds.records().iter().any(|r| r.groups.contains_key(group_attr)) {
        return Err(EstimationError::UnknownAttribute(group_attr.to_string()));
    }
    let mut by_category: BTreeMap<&str, Vec<&EvaluationRecord>> = BTreeMap::new();
    for (row, r) in ds.records().iter().enumerate() {
        let category = r
            .groups
            .get(group_attr)
            .ok_or_else(|| EstimationError::MissingGroupValue { attr: group_attr.to_string(), row })?;
        let members = by_category.entry(category.as_str()).or_default();
        if r.deferred {
            members.push(r);
        }
    }
    let mut out = BTreeMap::new();
    for (category, deferred) in by_category {
        let entry = if deferred.len() >= 2 {
            CatdEntry::Estimated(paired_estimate(deferred.into_iter(), level, "catd")?)
        } else {
            CatdEntry::Unavailable {
                n_deferred: deferred.len(),
                point: deferred.first().map(|r| f64::from(effect_of(r))),
            }
        };
        out.insert(category.to_string(), entry);
    }
    Ok(out)
}

/// Fraction of records whose active prediction matches the label.
pub fn system_accuracy(ds: &EvaluationDataset) -> Result<f64, EstimationError> {
    if ds.is_empty() {
        return Err(DataError::Empty.into());
    }
    let correct = ds.records().iter().filter(|r| OutcomeView::of(r).t).count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Accuracy of the deferring system minus accuracy of the model alone.
pub fn tau_delta(ds: &EvaluationDataset) -> Result<f64, EstimationError> {
    Scenario::S1.check(ds)?;
    if ds.is_empty() {
        return Err(DataError::Empty.into());
    }
    let n = ds.len() as f64;
    let system = ds.records().iter().filter(|r| OutcomeView::of(r).t).count() as f64 / n;
    let model = ds.records().iter().filter(|r| r.model_pred.as_ref() == Some(&r.label)).count() as f64 / n;
    Ok(system - model)
}

/// Horvitz-Thompson reweighting `(n / n1)·tau_d`, recovering the ATD from
/// aggregate accuracies.
pub fn reweight_tau_delta(tau_d: f64, n: usize, n1: usize) -> Result<f64, EstimationError> {
    if n1 == 0 || n < n1 {
        return Err(EstimationError::InvalidCounts { n, n1 });
    }
    Ok(n as f64 / n1 as f64 * tau_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fixtures::{binary, record};
    use crate::data::Label;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Deferred record with the given human/model correctness (label "1").
    fn deferred(t1: bool, t0: bool) -> EvaluationRecord {
        let p = |ok: bool| Some(if ok { "1" } else { "0" });
        record(1.0, true, p(t0), p(t1), "1")
    }

    fn kept(t0: bool) -> EvaluationRecord {
        record(0.0, false, Some(if t0 { "1" } else { "0" }), None, "1")
    }

    fn ds(records: Vec<EvaluationRecord>) -> EvaluationDataset {
        EvaluationDataset::new(records, binary()).unwrap()
    }

    #[test]
    fn individual_effect_signs() {
        let d = ds(vec![deferred(true, false), deferred(true, true), deferred(false, true), kept(false)]);
        assert_eq!(individual_effects(&d).unwrap(), vec![1, 0, -1]);
    }

    #[test]
    fn atd_mean_of_differences() {
        let d = ds(vec![
            deferred(true, false),
            deferred(true, true),
            deferred(false, false),
            deferred(true, false),
        ]);
        let e = estimate_atd(&d, 0.95).unwrap();
        assert_eq!(e.point, 0.5);
        assert_eq!(e.n_used, 4);
        // sd of (1, 0, 0, 1) with Bessel correction is √(1/3).
        assert_relative_eq!(e.se, (1.0f64 / 3.0).sqrt() / 2.0, max_relative = 1e-15);
    }

    #[test]
    fn atd_null_case() {
        let d = ds(vec![deferred(true, true), deferred(false, false), deferred(true, true)]);
        let e = estimate_atd(&d, 0.95).unwrap();
        assert_eq!((e.point, e.se, e.p_value), (0.0, 0.0, 1.0));
        assert_eq!((e.ci_low, e.ci_high), (0.0, 0.0));
    }

    #[test]
    fn atd_errors() {
        let d = ds(vec![deferred(true, false), kept(true)]);
        assert_eq!(estimate_atd(&d, 0.95), Err(EstimationError::TooFewDeferred { found: 1, needed: 2 }));
        let s2 = ds(vec![record(1.0, true, None, Some("1"), "1"), kept(true)]);
        assert_eq!(estimate_atd(&s2, 0.95), Err(EstimationError::Data(DataError::ScenarioUnavailable)));
        assert!(individual_effects(&ds(vec![kept(true)])).is_err());
    }

    fn grouped(r: EvaluationRecord, g: &str) -> EvaluationRecord {
        let mut r = r;
        r.groups.insert("sex".into(), g.into());
        r
    }

    #[test]
    fn catd_single_category_equals_atd() {
        let records: Vec<_> = [(true, false), (true, true), (false, true), (true, false)]
            .into_iter()
            .map(|(a, b)| grouped(deferred(a, b), "f"))
            .collect();
        let d = ds(records);
        let catd = estimate_catd(&d, "sex", 0.95).unwrap();
        let mut atd = estimate_atd(&d, 0.95).unwrap();
        atd.method = "catd".into();
        assert_eq!(catd.len(), 1);
        assert_eq!(catd["f"], CatdEntry::Estimated(atd));
    }

    #[test]
    fn catd_unavailable_categories() {
        let d = ds(vec![
            grouped(deferred(true, false), "f"),
            grouped(deferred(true, true), "f"),
            grouped(kept(true), "m"),
            grouped(deferred(true, false), "x"),
        ]);
        let catd = estimate_catd(&d, "sex", 0.95).unwrap();
        assert_eq!(catd["m"], CatdEntry::Unavailable { n_deferred: 0, point: None });
        assert_eq!(catd["x"], CatdEntry::Unavailable { n_deferred: 1, point: Some(1.0) });
        assert!(matches!(catd["f"], CatdEntry::Estimated(_)));
        assert_eq!(estimate_catd(&d, "age", 0.95), Err(EstimationError::UnknownAttribute("age".into())));
        let partial = ds(vec![grouped(deferred(true, false), "f"), deferred(true, true)]);
        assert!(matches!(
            estimate_catd(&partial, "sex", 0.95),
            Err(EstimationError::MissingGroupValue { row: 1, .. })
        ));
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(system_accuracy(&ds(vec![kept(true), deferred(true, false)])).unwrap(), 1.0);
        assert_eq!(system_accuracy(&ds(vec![kept(false), deferred(false, true)])).unwrap(), 0.0);
        let d = ds(vec![kept(true), kept(false), deferred(true, false), deferred(true, true)]);
        assert_eq!(system_accuracy(&d).unwrap(), 0.75);
    }

    #[test]
    fn tau_delta_and_reweighting() {
        // n = 10, n1 = 4, ATD = 0.5.
        let mut records =
            vec![deferred(true, false), deferred(true, true), deferred(false, false), deferred(true, false)];
        records.extend((0..6).map(|i| kept(i % 2 == 0)));
        let d = ds(records);
        let td = tau_delta(&d).unwrap();
        assert_relative_eq!(td, 0.2, max_relative = 1e-15);
        assert_relative_eq!(reweight_tau_delta(td, 10, 4).unwrap(), 0.5, max_relative = 1e-15);
        assert_eq!(reweight_tau_delta(0.2, 10, 4).unwrap(), 0.5);
        assert_eq!(reweight_tau_delta(0.3, 7, 7).unwrap(), 0.3);
        assert!(reweight_tau_delta(0.3, 7, 0).is_err());
        assert!(reweight_tau_delta(0.3, 3, 7).is_err());
        assert_eq!(tau_delta(&ds(vec![kept(true), kept(false)])).unwrap(), 0.0);
    }

    #[test]
    fn wald_reference_values() {
        let w = wald_inference(0.0, 0.3, 0.95).unwrap();
        assert_eq!(w.p_value, 1.0);
        assert_eq!(w.ci_low, -w.ci_high);
        // z = 2: p = 2(1 − Φ(2)); CI = 0.5 ± 1.959964·0.25.
        let w = wald_inference(0.5, 0.25, 0.95).unwrap();
        assert_relative_eq!(w.p_value, 0.04550026389635842, max_relative = 1e-12);
        assert_relative_eq!(w.ci_low, 0.010009003864986, max_relative = 1e-12);
        assert_relative_eq!(w.ci_high, 0.989990996135014, max_relative = 1e-12);
        let w = wald_inference(0.3, 0.0, 0.95).unwrap();
        assert_eq!((w.ci_low, w.ci_high, w.p_value), (0.3, 0.3, 0.0));
        assert_eq!(wald_inference(0.3, -1.0, 0.95), Err(EstimationError::InvalidStandardError(-1.0)));
        assert_eq!(wald_inference(0.3, 1.0, 1.0), Err(EstimationError::InvalidLevel(1.0)));
    }

    fn arb_dataset() -> impl Strategy<Value = EvaluationDataset> {
        proptest::collection::vec((any::<bool>(), 0u8..3, 0u8..3, 0u8..3, 0u8..3), 1..120).prop_map(|rows| {
            let records = rows
                .into_iter()
                .map(|(g, m, h, y, grp)| EvaluationRecord {
                    reject_score: 0.0,
                    deferred: g,
                    model_pred: Some(Label::from(["a", "b", "c"][m as usize])),
                    human_pred: Some(Label::from(["a", "b", "c"][h as usize])),
                    label: Label::from(["a", "b", "c"][y as usize]),
                    groups: [("g".into(), ["u", "v", "w"][grp as usize].into())].into(),
                })
                .collect();
            let labels = ["a", "b", "c"].into_iter().map(Label::from).collect();
            EvaluationDataset::new(records, Some(labels)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn accuracy_difference_identity(d in arb_dataset()) {
            let n1 = d.n_deferred();
            let td = tau_delta(&d).unwrap();
            if n1 == 0 {
                prop_assert_eq!(td, 0.0);
            } else {
                let effects = individual_effects(&d).unwrap();
                prop_assert!(effects.iter().all(|e| (-1..=1).contains(e)));
                let mean = effects.iter().map(|&e| f64::from(e)).sum::<f64>() / n1 as f64;
                prop_assert!((td - n1 as f64 / d.len() as f64 * mean).abs() <= 1e-12);
                prop_assert!((reweight_tau_delta(td, d.len(), n1).unwrap() - mean).abs() <= 1e-12);
                if n1 >= 2 {
                    let atd = estimate_atd(&d, 0.95).unwrap();
                    prop_assert_eq!(atd.point, mean);
                    prop_assert!(atd.ci_low <= atd.point && atd.point <= atd.ci_high);
                    prop_assert!((-1.0..=1.0).contains(&atd.point));
                }
            }
        }

        #[test]
        fn catd_decomposes_atd(d in arb_dataset()) {
            let n1 = d.n_deferred();
            prop_assume!(n1 >= 2);
            let atd = estimate_atd(&d, 0.9).unwrap();
            let catd = estimate_catd(&d, "g", 0.9).unwrap();
            let weighted: f64 = catd
                .values()
                .filter_map(|e| e.point().map(|p| p * e.n_deferred() as f64 / n1 as f64))
                .sum();
            prop_assert!((weighted - atd.point).abs() <= 1e-12);
        }

        #[test]
        fn wald_interval_contains_point(point in -1.0f64..1.0, se in 0.0f64..2.0, level in 0.01f64..0.999) {
            let w = wald_inference(point, se, level).unwrap();
            prop_assert!(w.ci_low <= point && point <= w.ci_high);
            prop_assert!((0.0..=1.0).contains(&w.p_value));
        }
    }
}
