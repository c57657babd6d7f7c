//! Delimiter-separated dataset files.
//!
//! One header row, one record per line. Missing predictions are empty
//! cells. The `deferred` column accepts `0`, `1`, `true` and `false` in any
//! case. Columns not named by the schema become group attributes unless the
//! schema lists the group columns explicitly. Writing produces the same
//! layout, so a file read and written back parses to an identical dataset.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use defer_causal_core::{DataError, EvaluationDataset, EvaluationRecord, Label, SyntheticDataset};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from reading or writing tabular files.
#[derive(Debug, Error)]
pub enum FormatError {
    /// Low-level CSV failure.
    #[error(transparent)]
    Csv(#[from] csv::Error),
    /// File system failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// A file could not be opened or created.
    #[error("{path}: {source}")]
    Open {
        /// File path.
        path: std::path::PathBuf,
        /// Underlying failure.
        source: std::io::Error,
    },
    /// A required column is absent from the header.
    #[error("missing column {0:?}")]
    MissingColumn(String),
    /// A cell could not be parsed.
    #[error("line {line}: {reason}")]
    Parse {
        /// One-based line number in the file.
        line: u64,
        /// What was wrong.
        reason: String,
    },
    /// The parsed records do not form a valid dataset.
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Column mapping and dialect of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    /// Reject-score column.
    pub score: String,
    /// Deferral-flag column.
    pub deferred: String,
    /// Model-prediction column (may be absent from the file).
    pub model_pred: String,
    /// Human-prediction column (may be absent from the file).
    pub human_pred: String,
    /// Ground-truth column.
    pub label: String,
    /// Group columns; `None` takes every column not named above.
    pub groups: Option<Vec<String>>,
    /// Field delimiter.
    pub delimiter: char,
    /// Declared label set; inferred from the data when absent.
    pub labels: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            score: "reject_score".into(),
            deferred: "deferred".into(),
            model_pred: "model_pred".into(),
            human_pred: "human_pred".into(),
            label: "label".into(),
            groups: None,
            delimiter: ',',
            labels: None,
        }
    }
}

impl Schema {
    fn delimiter_byte(&self) -> Result<u8, FormatError> {
        u8::try_from(self.delimiter).map_err(|_| FormatError::Parse {
            line: 0,
            reason: format!("delimiter {:?} is not a single-byte character", self.delimiter),
        })
    }

    fn label_set(&self) -> Option<BTreeSet<Label>> {
        self.labels.as_ref().map(|ls| ls.iter().map(|l| Label::from(l.as_str())).collect())
    }
}

/// Parse a deferral flag.
pub fn parse_deferred(cell: &str) -> Option<bool> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

fn required(headers: &csv::StringRecord, name: &str) -> Result<usize, FormatError> {
    column(headers, name).ok_or_else(|| FormatError::MissingColumn(name.to_string()))
}

fn optional_cell(cell: Option<&str>) -> Option<Label> {
    cell.filter(|c| !c.is_empty()).map(Label::from)
}

fn reader<R: Read>(input: R, schema: &Schema) -> Result<csv::Reader<R>, FormatError> {
    Ok(csv::ReaderBuilder::new().delimiter(schema.delimiter_byte()?).from_reader(input))
}

/// Read a dataset.
pub fn read_dataset<R: Read>(input: R, schema: &Schema) -> Result<EvaluationDataset, FormatError> {
    let mut rdr = reader(input, schema)?;
    let headers = rdr.headers()?.clone();
    let score = required(&headers, &schema.score)?;
    let deferred = required(&headers, &schema.deferred)?;
    let label = required(&headers, &schema.label)?;
    let model = column(&headers, &schema.model_pred);
    let human = column(&headers, &schema.human_pred);
    let groups: Vec<(String, usize)> = match &schema.groups {
        Some(names) => {
            names.iter().map(|g| required(&headers, g).map(|i| (g.clone(), i))).collect::<Result<_, _>>()?
        }
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| ![Some(score), Some(deferred), Some(label), model, human].contains(&Some(*i)))
            .map(|(i, h)| (h.to_string(), i))
            .collect(),
    };

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let parse_err = |reason: String| FormatError::Parse { line, reason };
        let score_cell = row.get(score).unwrap_or_default().trim();
        let reject_score: f64 = score_cell
            .parse()
            .map_err(|_| parse_err(format!("reject score {score_cell:?} is not a number")))?;
        let flag = row.get(deferred).unwrap_or_default();
        let deferred = parse_deferred(flag)
            .ok_or_else(|| parse_err(format!("deferred flag {flag:?} is not 0/1/true/false")))?;
        let label_cell = row.get(label).unwrap_or_default();
        if label_cell.is_empty() {
            return Err(parse_err("label is empty".into()));
        }
        records.push(EvaluationRecord {
            reject_score,
            deferred,
            model_pred: optional_cell(model.and_then(|i| row.get(i))),
            human_pred: optional_cell(human.and_then(|i| row.get(i))),
            label: Label::from(label_cell),
            groups: groups
                .iter()
                .filter_map(|(name, i)| {
                    row.get(*i).filter(|v| !v.is_empty()).map(|v| (name.clone(), v.to_string()))
                })
                .collect(),
        });
    }
    Ok(EvaluationDataset::new(records, schema.label_set())?)
}

/// Read the reject-score column of a file. A file with a single column is
/// read whatever its header says.
pub fn read_scores<R: Read>(input: R, schema: &Schema) -> Result<Vec<f64>, FormatError> {
    let mut rdr = reader(input, schema)?;
    let headers = rdr.headers()?.clone();
    let idx = match column(&headers, &schema.score) {
        Some(i) => i,
        None if headers.len() == 1 => 0,
        None => return Err(FormatError::MissingColumn(schema.score.clone())),
    };
    rdr.records()
        .map(|row| {
            let row = row?;
            let cell = row.get(idx).unwrap_or_default().trim();
            cell.parse().map_err(|_| FormatError::Parse {
                line: row.position().map_or(0, |p| p.line()),
                reason: format!("score {cell:?} is not a number"),
            })
        })
        .collect()
}

/// Shortest text that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Write a dataset. Group columns follow the fixed columns, sorted by name.
pub fn write_dataset<W: Write>(
    output: W,
    ds: &EvaluationDataset,
    schema: &Schema,
) -> Result<(), FormatError> {
    let mut wtr = csv::WriterBuilder::new().delimiter(schema.delimiter_byte()?).from_writer(output);
    let group_names: BTreeSet<&str> =
        ds.records().iter().flat_map(|r| r.groups.keys().map(String::as_str)).collect();
    let mut header =
        vec![&*schema.score, &*schema.deferred, &*schema.model_pred, &*schema.human_pred, &*schema.label];
    header.extend(group_names.iter().copied());
    wtr.write_record(&header)?;
    for r in ds.records() {
        let mut row = vec![
            format_f64(r.reject_score),
            (if r.deferred { "1" } else { "0" }).to_string(),
            r.model_pred.as_ref().map(|l| l.0.clone()).unwrap_or_default(),
            r.human_pred.as_ref().map(|l| l.0.clone()).unwrap_or_default(),
            r.label.0.clone(),
        ];
        row.extend(group_names.iter().map(|g| r.groups.get(*g).cloned().unwrap_or_default()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Open a file for reading, naming it on failure.
pub fn open(path: &Path) -> Result<File, FormatError> {
    File::open(path).map_err(|source| FormatError::Open { path: path.to_path_buf(), source })
}

/// Create a file for writing, naming it on failure.
pub fn create(path: &Path) -> Result<File, FormatError> {
    File::create(path).map_err(|source| FormatError::Open { path: path.to_path_buf(), source })
}

/// Read a dataset file.
pub fn load_dataset(path: &Path, schema: &Schema) -> Result<EvaluationDataset, FormatError> {
    read_dataset(open(path)?, schema)
}

/// Write a dataset file.
pub fn save_dataset(path: &Path, ds: &EvaluationDataset, schema: &Schema) -> Result<(), FormatError> {
    write_dataset(create(path)?, ds, schema)
}

/// Write the ground-truth sidecar of a synthetic sample: one row per record,
/// in the same order as the dataset file, with the features appended.
pub fn write_oracle<W: Write>(output: W, synth: &SyntheticDataset) -> Result<(), FormatError> {
    let mut wtr = csv::Writer::from_writer(output);
    let d = synth.features.first().map_or(0, Vec::len);
    let mut header: Vec<String> =
        ["row", "g_star", "f_star_pred", "component", "human_correct_prob", "f_star_correct_prob"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    header.extend((0..d).map(|j| format!("x{j}")));
    wtr.write_record(&header)?;
    for (i, (o, x)) in synth.oracle.iter().zip(&synth.features).enumerate() {
        let mut row = vec![
            i.to_string(),
            u8::from(o.g_star).to_string(),
            o.f_star_pred.0.clone(),
            o.component.to_string(),
            format_f64(o.human_correct_prob),
            format_f64(o.f_star_correct_prob),
        ];
        row.extend(x.iter().map(|v| format_f64(*v)));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
