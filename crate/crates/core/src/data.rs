//! Evaluation records, dataset validation, outcome views and seeded splitting.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Tolerance on the sum of split fractions.
const FRACTION_SUM_TOLERANCE: f64 = 1e-9;

/// A class label. Labels are opaque and compared by exact string equality.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct Label(pub String);

impl Label {
    /// Borrow the label text.
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for Label {
    fn from(s: &str) -> Self {
        Label(String::from(s))
    }
}

impl From<String> for Label {
    fn from(s: String) -> Self {
        Label(s)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Errors raised while building or transforming datasets.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    /// A row could not be parsed.
    #[error("row {row}: malformed record: {reason}")]
    Malformed {
        /// Zero-based data row index.
        row: usize,
        /// What was wrong.
        reason: String,
    },
    /// The reject score is NaN or infinite.
    #[error("row {row}: reject score is not finite")]
    NonFiniteScore {
        /// Zero-based data row index.
        row: usize,
    },
    /// A deferred record carries no human prediction.
    #[error("row {row}: deferred record has no human prediction")]
    MissingHumanPrediction {
        /// Zero-based data row index.
        row: usize,
    },
    /// A non-deferred record carries no model prediction.
    #[error("row {row}: non-deferred record has no model prediction")]
    MissingModelPrediction {
        /// Zero-based data row index.
        row: usize,
    },
    /// A label or prediction is outside the declared label set.
    #[error("row {row}: label {value:?} is not in the declared label set")]
    UnknownLabel {
        /// Zero-based data row index.
        row: usize,
        /// Offending value.
        value: String,
    },
    /// Fewer than two class labels.
    #[error("label set has {size} element(s); at least 2 are required")]
    LabelSetTooSmall {
        /// Size of the label set.
        size: usize,
    },
    /// The dataset has no records.
    #[error("dataset is empty")]
    Empty,
    /// Split fractions are not positive or do not sum to one.
    #[error("split fractions ({0}, {1}, {2}) must be positive and sum to 1")]
    InvalidFractions(f64, f64, f64),
    /// Scenario-1 estimation was requested on data without model predictions
    /// for every record.
    #[error("scenario 1 requires a model prediction on every record")]
    ScenarioUnavailable,
}

/// One evaluated instance of a deferring system.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvaluationRecord {
    /// Reject score; high values favour deferring to the human.
    pub reject_score: f64,
    /// Whether the instance was routed to the human.
    pub deferred: bool,
    /// ML model prediction, if logged.
    pub model_pred: Option<Label>,
    /// Human prediction, if logged.
    pub human_pred: Option<Label>,
    /// Ground truth.
    pub label: Label,
    /// Categorical attributes used for conditional effects.
    pub groups: BTreeMap<String, String>,
}

impl EvaluationRecord {
    /// Prediction of the predictor that is active under the record's flag.
    pub fn active_prediction(&self) -> Option<&Label> {
        if self.deferred {
            self.human_pred.as_ref()
        } else {
            self.model_pred.as_ref()
        }
    }

    fn validate(&self, row: usize, labels: &BTreeSet<Label>) -> Result<(), DataError> {
        if !self.reject_score.is_finite() {
            return Err(DataError::NonFiniteScore { row });
        }
        if self.deferred && self.human_pred.is_none() {
            return Err(DataError::MissingHumanPrediction { row });
        }
        if !self.deferred && self.model_pred.is_none() {
            return Err(DataError::MissingModelPrediction { row });
        }
        let values = [Some(&self.label), self.model_pred.as_ref(), self.human_pred.as_ref()];
        for value in values.into_iter().flatten() {
            if !labels.contains(value) {
                return Err(DataError::UnknownLabel { row, value: value.0.clone() });
            }
        }
        Ok(())
    }
}

/// Which predictions are available for deferred instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Scenario {
    /// Model predictions are logged for every instance, deferred or not.
    S1,
    /// Only the active predictor's output is logged.
    S2,
}

impl Scenario {
    /// Check that `ds` supports this scenario.
    pub fn check(self, ds: &EvaluationDataset) -> Result<(), DataError> {
        match self {
            Scenario::S1 if !ds.scenario1_capable() => Err(DataError::ScenarioUnavailable),
            _ => Ok(()),
        }
    }
}

/// A validated, immutable collection of evaluation records.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationDataset {
    records: Vec<EvaluationRecord>,
    label_set: BTreeSet<Label>,
    scenario1_capable: bool,
}

impl EvaluationDataset {
    /// Validate `records` against `label_set`.
    ///
    /// When no label set is declared it is inferred from every label and
    /// prediction in the data. Record order is preserved.
    pub fn new(
        records: Vec<EvaluationRecord>,
        label_set: Option<BTreeSet<Label>>,
    ) -> Result<Self, DataError> {
        let label_set = match label_set {
            Some(set) => set,
            None => records
                .iter()
                .flat_map(|r| {
                    [Some(&r.label), r.model_pred.as_ref(), r.human_pred.as_ref()]
                        .into_iter()
                        .flatten()
                        .cloned()
                })
                .collect(),
        };
        if label_set.len() < 2 {
            return Err(DataError::LabelSetTooSmall { size: label_set.len() });
        }
        for (row, record) in records.iter().enumerate() {
            record.validate(row, &label_set)?;
        }
        let scenario1_capable = records.iter().all(|r| r.model_pred.is_some());
        Ok(EvaluationDataset { records, label_set, scenario1_capable })
    }

    /// Build a dataset sharing this one's label set.
    pub fn with_records(&self, records: Vec<EvaluationRecord>) -> Result<Self, DataError> {
        Self::new(records, Some(self.label_set.clone()))
    }

    /// Records in load order.
    pub fn records(&self) -> &[EvaluationRecord] {
        &self.records
    }

    /// Declared or inferred label set.
    pub fn label_set(&self) -> &BTreeSet<Label> {
        &self.label_set
    }

    /// True iff every record has a model prediction.
    pub fn scenario1_capable(&self) -> bool {
        self.scenario1_capable
    }

    /// Number of records.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// True when there are no records.
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of deferred records.
    pub fn n_deferred(&self) -> usize {
        self.records.iter().filter(|r| r.deferred).count()
    }

    /// Reject scores in record order.
    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.reject_score).collect()
    }

    /// Consume the dataset, returning its records.
    pub fn into_records(self) -> Vec<EvaluationRecord> {
        self.records
    }
}

/// Correctness outcomes of one record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutcomeView {
    /// Correctness of the active predictor.
    pub t: bool,
    /// Correctness of the model, when its prediction is logged.
    pub t0: Option<bool>,
    /// Correctness of the human, when their prediction is logged.
    pub t1: Option<bool>,
}

impl OutcomeView {
    /// Outcome of `record` under the correctness indicator.
    pub fn of(record: &EvaluationRecord) -> Self {
        let t0 = record.model_pred.as_ref().map(|p| *p == record.label);
        let t1 = record.human_pred.as_ref().map(|p| *p == record.label);
        let t = if record.deferred { t1 } else { t0 };
        OutcomeView {
            // Validated datasets always carry the active prediction.
            t: t.unwrap_or(false),
            t0,
            t1,
        }
    }
}

/// Per-record correctness outcomes, in record order.
pub fn outcome_view(ds: &EvaluationDataset) -> Vec<OutcomeView> {
    ds.records().iter().map(OutcomeView::of).collect()
}

/// Non-fatal conditions noticed while splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitWarning {
    /// The training part received no records.
    EmptyTrain,
    /// The validation part received no records.
    EmptyValidation,
    /// The test part received no records.
    EmptyTest,
}

/// Result of [`split_dataset`].
#[derive(Debug, Clone)]
pub struct Split {
    /// Training part.
    pub train: EvaluationDataset,
    /// Validation part (used for cutoff calibration).
    pub validation: EvaluationDataset,
    /// Test part (used for estimation).
    pub test: EvaluationDataset,
    /// Parts that came out empty.
    pub warnings: Vec<SplitWarning>,
}

/// Seeded partition of `0..n` into train/validation/test index sets.
///
/// Train and validation receive `floor(f * n)` indices; the remainder goes
/// to test. Each index set is returned in ascending order.
pub fn split_indices(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<[Vec<usize>; 3], DataError> {
    let (f_train, f_val, f_test) = fractions;
    let all_positive = [f_train, f_val, f_test].iter().all(|f| f.is_finite() && *f > 0.0);
    if !all_positive || libm::fabs(f_train + f_val + f_test - 1.0) > FRACTION_SUM_TOLERANCE {
        return Err(DataError::InvalidFractions(f_train, f_val, f_test));
    }
    if n == 0 {
        return Err(DataError::Empty);
    }
    let n_train = floor_count(f_train, n);
    let n_val = floor_count(f_val, n).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok([train, val, test])
}

/// `floor(f * n)`, tolerant to representation error in `f` (0.29 * 100).
pub(crate) fn floor_count(f: f64, n: usize) -> usize {
    let raw = libm::floor(f * n as f64 + 1e-9);
    if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(n)
    }
}

/// Seeded train/validation/test split of a dataset.
pub fn split_dataset(
    ds: &EvaluationDataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Split, DataError> {
    let [train, val, test] = split_indices(ds.len(), fractions, seed)?;
    let pick = |idx: &[usize]| -> EvaluationDataset {
        EvaluationDataset {
            records: idx.iter().map(|&i| ds.records[i].clone()).collect(),
            label_set: ds.label_set.clone(),
            scenario1_capable: idx.iter().all(|&i| ds.records[i].model_pred.is_some()),
        }
    };
    let mut warnings = Vec::new();
    if train.is_empty() {
        warnings.push(SplitWarning::EmptyTrain);
    }
    if val.is_empty() {
        warnings.push(SplitWarning::EmptyValidation);
    }
    if test.is_empty() {
        warnings.push(SplitWarning::EmptyTest);
    }
    Ok(Split { train: pick(&train), validation: pick(&val), test: pick(&test), warnings })
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub(crate) fn record(
        score: f64,
        deferred: bool,
        model: Option<&str>,
        human: Option<&str>,
        label: &str,
    ) -> EvaluationRecord {
        EvaluationRecord {
            reject_score: score,
            deferred,
            model_pred: model.map(Label::from),
            human_pred: human.map(Label::from),
            label: Label::from(label),
            groups: BTreeMap::new(),
        }
    }

    pub(crate) fn binary() -> Option<BTreeSet<Label>> {
        Some(["0", "1"].into_iter().map(Label::from).collect())
    }
}
