//! Report structure and its JSON, table and plot-data renderings.
//!
//! Every estimator cell is a [`Cell`]: an estimate, a structured error or an
//! explicit "unavailable" reason. Every reported p-value carries a
//! `significant` flag set against the report's Bonferroni threshold.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use defer_causal_core::{
    BandwidthChoice, CalibrationError, DataError, DensityTestResult, EffectEstimate, EstimationError,
    FalsificationError, RdError, RdEstimate, RdFit, Scenario,
};
use serde::{Deserialize, Serialize};

use crate::config::SystemChoice;
use crate::table::format_f64;

/// Serialise non-finite floats as strings, which JSON cannot carry.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            v if v.is_finite() => s.serialize_f64(v),
            v if v > 0.0 => s.serialize_str("inf"),
            v if v < 0.0 => s.serialize_str("-inf"),
            _ => s.serialize_str("nan"),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("unexpected number {other:?}"))),
            },
        }
    }
}

/// A failed estimation: a stable snake_case code and a readable message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellError {
    /// Stable machine-readable code.
    pub code: String,
    /// Human-readable description.
    pub message: String,
}

impl CellError {
    /// Error with an explicit code.
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        CellError { code: code.to_string(), message: message.into() }
    }
}

fn data_code(e: &DataError) -> &'static str {
    match e {
        DataError::Malformed { .. } => "malformed",
        DataError::NonFiniteScore { .. } => "non_finite_score",
        DataError::MissingHumanPrediction { .. } => "missing_human_prediction",
        DataError::MissingModelPrediction { .. } => "missing_model_prediction",
        DataError::UnknownLabel { .. } => "unknown_label",
        DataError::LabelSetTooSmall { .. } => "label_set_too_small",
        DataError::Empty => "empty",
        DataError::InvalidFractions(..) => "invalid_fractions",
        DataError::ScenarioUnavailable => "scenario_unavailable",
    }
}

fn estimation_code(e: &EstimationError) -> &'static str {
    match e {
        EstimationError::Data(d) => data_code(d),
        EstimationError::TooFewDeferred { .. } => "too_few_deferred",
        EstimationError::UnknownAttribute(_) => "unknown_attribute",
        EstimationError::MissingGroupValue { .. } => "missing_group_value",
        EstimationError::InvalidLevel(_) => "invalid_level",
        EstimationError::InvalidStandardError(_) => "invalid_standard_error",
        EstimationError::InvalidCounts { .. } => "invalid_counts",
    }
}

fn rd_code(e: &RdError) -> &'static str {
    match e {
        RdError::InvalidBandwidth(_) => "invalid_bandwidth",
        RdError::NonFinitePoint(_) => "non_finite_point",
        RdError::InsufficientSupport { .. } => "insufficient_support",
        RdError::Singular(_) => "singular",
        RdError::TooFewPoints { .. } => "too_few_points",
        RdError::NoValidBandwidth => "no_valid_bandwidth",
        RdError::Inference(e) => estimation_code(e),
    }
}

fn falsification_code(e: &FalsificationError) -> &'static str {
    match e {
        FalsificationError::InsufficientPoints { .. } => "insufficient_points",
        FalsificationError::InvalidProbability(_) => "invalid_probability",
        FalsificationError::InvalidWindow(_) => "invalid_window",
        FalsificationError::EmptyWindow => "empty_window",
        FalsificationError::NonFiniteScore(_) => "non_finite_score",
        FalsificationError::Rd(e) => rd_code(e),
    }
}

fn calibration_code(e: &CalibrationError) -> &'static str {
    match e {
        CalibrationError::EmptyScores => "empty_scores",
        CalibrationError::NonFiniteScore { .. } => "non_finite_score",
        CalibrationError::CoverageOutOfRange(_) => "coverage_out_of_range",
        CalibrationError::Orphaned(_) => "orphaned",
    }
}

macro_rules! cell_error_from {
    ($($ty:ty => $code:ident),* $(,)?) => {$(
        impl From<$ty> for CellError {
            fn from(e: $ty) -> Self {
                CellError::new($code(&e), e.to_string())
            }
        }
    )*};
}

cell_error_from!(
    DataError => data_code,
    EstimationError => estimation_code,
    RdError => rd_code,
    FalsificationError => falsification_code,
    CalibrationError => calibration_code,
);

/// Outcome of one grid × estimator cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum Cell<T> {
    /// Estimated.
    Ok(T),
    /// Estimation failed.
    Error(CellError),
    /// Not attempted, with the reason.
    Unavailable(String),
}

impl<T> Cell<T> {
    /// Cell from an estimator result.
    pub fn from_result<E: Into<CellError>>(r: Result<T, E>) -> Self {
        match r {
            Ok(v) => Cell::Ok(v),
            Err(e) => Cell::Error(e.into()),
        }
    }

    /// The estimate, if any.
    pub fn ok(&self) -> Option<&T> {
        match self {
            Cell::Ok(v) => Some(v),
            _ => None,
        }
    }

    fn ok_mut(&mut self) -> Option<&mut T> {
        match self {
            Cell::Ok(v) => Some(v),
            _ => None,
        }
    }
}

/// An estimate with its Bonferroni flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tested {
    /// The estimate and its Wald inference.
    #[serde(flatten)]
    pub estimate: EffectEstimate,
    /// `p_value < threshold`.
    pub significant: bool,
}

impl From<EffectEstimate> for Tested {
    fn from(estimate: EffectEstimate) -> Self {
        Tested { estimate, significant: false }
    }
}

/// Cutoff of one grid row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffInfo {
    /// Reject-score threshold (`"inf"` when nothing is deferred).
    #[serde(with = "extended_f64")]
    pub value: f64,
    /// Fraction of validation scores below the cutoff.
    pub validation_coverage: Option<f64>,
    /// Fraction of test records not deferred.
    pub test_coverage: f64,
    /// Deferred test records.
    pub n_deferred: usize,
}

/// Conditional effect of one group value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatdCell {
    /// Deferred records in the group.
    pub n_deferred: usize,
    /// Mean individual effect when at least one record is deferred.
    pub point: Option<f64>,
    /// Full estimate when at least two records are deferred.
    pub estimate: Option<Tested>,
}

/// RD estimate with both side fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdCell {
    /// Jump at the cutoff.
    pub estimate: Tested,
    /// Fit below the cutoff.
    pub left: RdFit,
    /// Fit at and above the cutoff.
    pub right: RdFit,
    /// Bandwidth used.
    pub bandwidth: BandwidthChoice,
}

impl From<RdEstimate> for RdCell {
    fn from(e: RdEstimate) -> Self {
        RdCell { estimate: e.estimate.into(), left: e.left, right: e.right, bandwidth: e.bandwidth }
    }
}

/// RD at fake cutoffs inside each true side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboCutoffCell {
    /// Placebo cutoff below the true one.
    pub kappa_low: f64,
    /// Placebo cutoff above the true one.
    pub kappa_high: f64,
    /// Estimate at `kappa_low` on the non-deferred side.
    pub low: Cell<RdCell>,
    /// Estimate at `kappa_high` on the deferred side.
    pub high: Cell<RdCell>,
}

/// RD on one seeded Bernoulli placebo outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboOutcomeCell {
    /// Seed of the placebo draw.
    pub seed: u64,
    /// Estimate.
    pub result: Cell<RdCell>,
}

/// Count-balance density test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCell {
    /// Counts, p-value and histogram.
    #[serde(flatten)]
    pub result: DensityTestResult,
    /// `p_value < threshold`.
    pub significant: bool,
}

/// One target coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    /// Target coverage.
    pub coverage: f64,
    /// Calibrated cutoff.
    pub cutoff: Cell<CutoffInfo>,
    /// System accuracy on the test set.
    pub accuracy: Cell<f64>,
    /// Average effect on the deferred.
    pub atd: Cell<Tested>,
    /// True ATD from the generator's annotations (synthetic data only).
    pub oracle_atd: Option<f64>,
    /// Conditional effects per group attribute and value.
    pub catd: BTreeMap<String, Cell<BTreeMap<String, CatdCell>>>,
    /// Effect local to the cutoff.
    pub rd: Cell<RdCell>,
    /// Placebo-cutoff test.
    pub placebo_cutoff: Cell<PlaceboCutoffCell>,
    /// Placebo-outcome replicates.
    pub placebo_outcome: Cell<Vec<PlaceboOutcomeCell>>,
    /// Density test at the cutoff.
    pub density: Cell<DensityCell>,
}

impl Row {
    /// Row whose every cell carries the same reason.
    pub fn unavailable(coverage: f64, cutoff: Cell<CutoffInfo>, reason: &str) -> Self {
        let na = || reason.to_string();
        Row {
            coverage,
            cutoff,
            accuracy: Cell::Unavailable(na()),
            atd: Cell::Unavailable(na()),
            oracle_atd: None,
            catd: BTreeMap::new(),
            rd: Cell::Unavailable(na()),
            placebo_cutoff: Cell::Unavailable(na()),
            placebo_outcome: Cell::Unavailable(na()),
            density: Cell::Unavailable(na()),
        }
    }

    /// Visit every reported p-value with its significance flag.
    pub fn for_each_test(&mut self, f: &mut impl FnMut(f64, &mut bool)) {
        let mut tested = |t: &mut Tested| f(t.estimate.p_value, &mut t.significant);
        if let Some(t) = self.atd.ok_mut() {
            tested(t);
        }
        for groups in self.catd.values_mut() {
            for c in groups.ok_mut().into_iter().flat_map(|m| m.values_mut()) {
                if let Some(t) = c.estimate.as_mut() {
                    tested(t);
                }
            }
        }
        if let Some(rd) = self.rd.ok_mut() {
            tested(&mut rd.estimate);
        }
        if let Some(pc) = self.placebo_cutoff.ok_mut() {
            for side in [&mut pc.low, &mut pc.high] {
                if let Some(rd) = side.ok_mut() {
                    tested(&mut rd.estimate);
                }
            }
        }
        for rep in self.placebo_outcome.ok_mut().into_iter().flatten() {
            if let Some(rd) = rep.result.ok_mut() {
                tested(&mut rd.estimate);
            }
        }
        if let Some(d) = self.density.ok_mut() {
            f(d.result.p_value, &mut d.significant);
        }
    }
}

/// Full pipeline output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Data source description.
    pub source: String,
    /// Surrogate system, for synthetic data.
    pub system: Option<SystemChoice>,
    /// Estimators run.
    pub scenario: Scenario,
    /// Confidence level.
    pub level: f64,
    /// Family-wise error rate.
    pub alpha: f64,
    /// Validation records used for calibration.
    pub n_validation: usize,
    /// Test records used for estimation.
    pub n_test: usize,
    /// Run-level remarks (skipped blocks, split warnings).
    pub notes: Vec<String>,
    /// One row per target coverage.
    pub rows: Vec<Row>,
    /// p-values reported.
    pub tests_run: usize,
    /// Bonferroni family size (`tests_run` unless overridden).
    pub family_size: usize,
    /// Per-test threshold `alpha / family_size`; absent for an empty family.
    pub threshold: Option<f64>,
}

impl Report {
    /// Count p-values, set the threshold and every significance flag.
    pub fn apply_bonferroni(&mut self, family_size: Option<usize>) {
        let mut m = 0;
        for row in &mut self.rows {
            row.for_each_test(&mut |_, _| m += 1);
        }
        self.tests_run = m;
        self.family_size = family_size.unwrap_or(m);
        self.threshold = defer_causal_core::bonferroni_threshold(self.alpha, self.family_size).ok();
        let threshold = self.threshold;
        for row in &mut self.rows {
            row.for_each_test(&mut |p, sig| *sig = threshold.is_some_and(|t| p < t));
        }
    }
}

/// Output format of [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum ReportFormat {
    /// Pretty-printed JSON.
    #[default]
    Json,
    /// Fixed-width text table, one line per coverage.
    Table,
}

/// JSON text of a report. Identical reports give identical bytes.
pub fn report_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("reports always serialise");
    s.push('\n');
    s
}

/// `"< 7.52e-5"`: threshold to three significant digits.
pub fn format_threshold(t: f64) -> String {
    format!("< {t:.2e}")
}

fn estimate_text(t: &Tested) -> String {
    let star = if t.significant { "*" } else { "" };
    format!("{:.3} ({:.2e}){star}", t.estimate.point, t.estimate.p_value)
}

fn cell_text<T>(cell: &Cell<T>, f: impl Fn(&T) -> String) -> String {
    match cell {
        Cell::Ok(v) => f(v),
        Cell::Error(e) => format!("error:{}", e.code),
        Cell::Unavailable(_) => "n/a".into(),
    }
}

/// Text table: header, one line per row, then the multiplicity footer.
pub fn report_table(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5}  {:>12}  {:>8}  {:>8}  {:<24}  {:<24}",
        "c", "cutoff", "achieved", "accuracy", "ATD (p)", "RD (p)"
    );
    for row in &report.rows {
        let cutoff = cell_text(&row.cutoff, |c| format!("{:.4}", c.value));
        let achieved = cell_text(&row.cutoff, |c| format!("{:.3}", c.test_coverage));
        let acc = cell_text(&row.accuracy, |a| format!("{a:.3}"));
        let atd = cell_text(&row.atd, estimate_text);
        let rd = cell_text(&row.rd, |r| estimate_text(&r.estimate));
        let _ = writeln!(
            out,
            "{:>5.2}  {cutoff:>12}  {achieved:>8}  {acc:>8}  {atd:<24}  {rd:<24}",
            row.coverage
        );
    }
    let threshold = report.threshold.map_or_else(|| "n/a".to_string(), format_threshold);
    let _ = writeln!(
        out,
        "tests = {}, family size = {}, Bonferroni threshold {threshold} (* significant)",
        report.tests_run, report.family_size
    );
    out
}

/// Write a report in the requested format.
pub fn emit_report<W: Write>(report: &Report, format: ReportFormat, mut out: W) -> std::io::Result<()> {
    let text = match format {
        ReportFormat::Json => report_json(report),
        ReportFormat::Table => report_table(report),
    };
    out.write_all(text.as_bytes())
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::other)?;
    w.write_record(header).map_err(std::io::Error::other)?;
    for r in rows {
        w.write_record(&r).map_err(std::io::Error::other)?;
    }
    w.flush()
}

fn estimate_columns(c: f64, e: &EffectEstimate) -> Vec<String> {
    [c, e.point, e.ci_low, e.ci_high, e.p_value].map(format_f64).to_vec()
}

/// Histogram rows `(c, cutoff, side, low, high, count)` of one density test.
pub fn histogram_rows(c: f64, cutoff: f64, d: &DensityTestResult) -> Vec<Vec<String>> {
    d.histogram
        .iter()
        .map(|b| {
            let side = match b.side {
                defer_causal_core::Side::Left => "left",
                defer_causal_core::Side::Right => "right",
            };
            vec![
                format_f64(c),
                format_f64(cutoff),
                side.to_string(),
                format_f64(b.low),
                format_f64(b.high),
                b.count.to_string(),
            ]
        })
        .collect()
}

/// Column names of histogram files.
pub const HISTOGRAM_HEADER: [&str; 6] = ["c", "cutoff", "side", "low", "high", "count"];

/// Write a histogram file for one density test.
pub fn write_histogram(path: &Path, c: f64, cutoff: f64, d: &DensityTestResult) -> std::io::Result<()> {
    write_csv(path, &HISTOGRAM_HEADER, histogram_rows(c, cutoff, d))
}

/// Write one CSV per plot panel into `dir`: `accuracy.csv`, `atd.csv`,
/// `rd.csv` and `density.csv`. Rows whose cell failed are left out.
pub fn emit_plotdata(report: &Report, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let accuracy = report
        .rows
        .iter()
        .filter_map(|r| r.accuracy.ok().map(|a| vec![format_f64(r.coverage), format_f64(*a)]))
        .collect();
    let atd = report
        .rows
        .iter()
        .filter_map(|r| r.atd.ok().map(|t| estimate_columns(r.coverage, &t.estimate)))
        .collect();
    let rd = report
        .rows
        .iter()
        .filter_map(|r| r.rd.ok().map(|x| estimate_columns(r.coverage, &x.estimate.estimate)))
        .collect();
    let density = report
        .rows
        .iter()
        .filter_map(|r| Some(histogram_rows(r.coverage, r.cutoff.ok()?.value, &r.density.ok()?.result)))
        .flatten()
        .collect();
    let files = [
        ("accuracy.csv", &["c", "accuracy"][..], accuracy),
        ("atd.csv", &["c", "point", "lo", "hi", "p"][..], atd),
        ("rd.csv", &["c", "point", "lo", "hi", "p"][..], rd),
        ("density.csv", &HISTOGRAM_HEADER[..], density),
    ];
    let mut written = Vec::new();
    for (name, header, rows) in files {
        let path = dir.join(name);
        write_csv(&path, header, rows)?;
        written.push(path);
    }
    Ok(written)
}
