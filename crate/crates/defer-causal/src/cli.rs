//! Command-line interface.
//!
//! Single-estimate subcommands print JSON to standard output. A failed
//! estimate is printed as `{"error": {"code": …, "message": …}}` and is
//! not a failure of the command; unreadable input and invalid settings are.
//! `significant` flags in single-test output are unadjusted, at `1 − level`.

use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use defer_causal_core::{
    apply_policy, coverage_grid, density_test, estimate_atd, estimate_catd, estimate_rd, generate_synth,
    placebo_cutoff_test, placebo_outcome_test, Cutoff, EvaluationDataset, Kernel, RdEstimate, SynthConfig,
    SynthError,
};
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::config::{default_coverages, ConfigError, PipelineConfig};
use crate::pipeline::{run_pipeline, PipelineError};
use crate::report::{
    emit_plotdata, emit_report, write_histogram, Cell, CellError, DensityCell, PlaceboCutoffCell, RdCell,
    ReportFormat,
};
use crate::table::{
    create, load_dataset, open, read_scores, save_dataset, write_oracle, FormatError, Schema,
};

/// Environment variable holding the log filter (`error`, `warn`, `info`, …).
pub const LOG_ENV: &str = "DEFER_CAUSAL_LOG";

/// Failures that make the command exit with a non-zero status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration file.
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// Unreadable or malformed input.
    #[error(transparent)]
    Format(#[from] FormatError),
    /// Pipeline setup failed.
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    /// Synthetic generation failed.
    #[error(transparent)]
    Synth(#[from] SynthError),
    /// Output could not be written.
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// Invalid flag value.
    #[error("{0}")]
    Usage(String),
}

/// Causal evaluation of deferring systems.
#[derive(Debug, Parser)]
#[command(name = "defer-causal", version, about)]
pub struct Cli {
    /// Subcommand.
    #[command(subcommand)]
    pub command: Command,
}

/// RD kernel on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum KernelArg {
    /// `max(0, 1 − d/h)`.
    #[default]
    Triangular,
    /// `1{d < h}`.
    Uniform,
}

impl From<KernelArg> for Kernel {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Triangular => Kernel::Triangular,
            KernelArg::Uniform => Kernel::Uniform,
        }
    }
}

/// Input file and its column mapping.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset file.
    #[arg(long)]
    pub data: PathBuf,
    /// Config file whose `[schema]` table maps the columns.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Field delimiter.
    #[arg(long)]
    pub delimiter: Option<char>,
    /// Reject-score column.
    #[arg(long)]
    pub score_col: Option<String>,
    /// Deferral-flag column.
    #[arg(long)]
    pub deferred_col: Option<String>,
    /// Model-prediction column.
    #[arg(long)]
    pub model_col: Option<String>,
    /// Human-prediction column.
    #[arg(long)]
    pub human_col: Option<String>,
    /// Ground-truth column.
    #[arg(long)]
    pub label_col: Option<String>,
    /// Group columns (comma separated); default: every other column.
    #[arg(long, value_delimiter = ',')]
    pub group_cols: Option<Vec<String>>,
    /// Full label set (comma separated); default: labels seen in the file.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
}

impl DataArgs {
    /// Schema from the config file, overridden by flags.
    pub fn schema(&self) -> Result<Schema, CliError> {
        let mut s = match &self.config {
            Some(path) => PipelineConfig::from_file_unchecked(path)?.schema,
            None => Schema::default(),
        };
        let set = |field: &mut String, v: &Option<String>| {
            if let Some(v) = v {
                *field = v.clone();
            }
        };
        set(&mut s.score, &self.score_col);
        set(&mut s.deferred, &self.deferred_col);
        set(&mut s.model_pred, &self.model_col);
        set(&mut s.human_pred, &self.human_col);
        set(&mut s.label, &self.label_col);
        if let Some(d) = self.delimiter {
            s.delimiter = d;
        }
        if self.group_cols.is_some() {
            s.groups.clone_from(&self.group_cols);
        }
        if self.labels.is_some() {
            s.labels.clone_from(&self.labels);
        }
        Ok(s)
    }

    fn load(&self) -> Result<EvaluationDataset, CliError> {
        Ok(load_dataset(&self.data, &self.schema()?)?)
    }
}

/// Subcommands.
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its ground-truth sidecar.
    Synth {
        /// Config file with a `[synth]` table (defaults when absent).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset output path.
        #[arg(long)]
        out: PathBuf,
        /// Sidecar output path; default: `<out>.oracle.csv`.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Cutoffs achieving target coverages on a set of scores.
    Calibrate {
        /// A coverage, a comma-separated list, or `grid` for 0, .1, …, .9.
        #[arg(long)]
        coverage: String,
        /// File with a reject-score column (or a single column).
        #[arg(long)]
        scores: PathBuf,
        /// Name of the score column.
        #[arg(long, default_value = "reject_score")]
        score_col: String,
        /// Field delimiter.
        #[arg(long, default_value_t = ',')]
        delimiter: char,
    },
    /// Average effect of deferring on the deferred.
    Atd {
        /// Input.
        #[command(flatten)]
        data: DataArgs,
        /// Re-flag records at this cutoff first.
        #[arg(long)]
        cutoff: Option<f64>,
        /// Confidence level.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Average effect on the deferred within each value of a group attribute.
    Catd {
        /// Input.
        #[command(flatten)]
        data: DataArgs,
        /// Group attribute.
        #[arg(long)]
        group: String,
        /// Re-flag records at this cutoff first.
        #[arg(long)]
        cutoff: Option<f64>,
        /// Confidence level.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Regression-discontinuity effect at a cutoff.
    Rd {
        /// Input.
        #[command(flatten)]
        data: DataArgs,
        /// Deferral cutoff.
        #[arg(long)]
        cutoff: f64,
        /// Bandwidth; cross-validated when absent.
        #[arg(long)]
        bandwidth: Option<f64>,
        /// Kernel.
        #[arg(long, value_enum, default_value_t)]
        kernel: KernelArg,
        /// Confidence level.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Placebo-cutoff, placebo-outcome and density tests at a cutoff.
    Falsify {
        /// Input.
        #[command(flatten)]
        data: DataArgs,
        /// Deferral cutoff.
        #[arg(long)]
        cutoff: f64,
        /// Number of placebo-outcome replicates.
        #[arg(long, default_value_t = 1)]
        placebo_seeds: u64,
        /// Seed of the first replicate.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Success probability of placebo outcomes.
        #[arg(long, default_value_t = 0.5)]
        placebo_p: f64,
        /// Bandwidth; cross-validated when absent.
        #[arg(long)]
        bandwidth: Option<f64>,
        /// Kernel.
        #[arg(long, value_enum, default_value_t)]
        kernel: KernelArg,
        /// Density-test half-window; 10% of the score range when absent.
        #[arg(long)]
        window: Option<f64>,
        /// Confidence level.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        /// Write the density histogram to this CSV file.
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Run the full evaluation protocol from a config file.
    Report {
        /// Config file.
        #[arg(long)]
        config: PathBuf,
        /// Output format.
        #[arg(long, value_enum, default_value_t)]
        format: ReportFormat,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for plot-data CSV files.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
        /// Bonferroni family size override.
        #[arg(long)]
        family_size: Option<usize>,
    },
}

/// Parse a `--coverage` value.
pub fn parse_coverages(text: &str) -> Result<Vec<f64>, CliError> {
    if text.trim() == "grid" {
        return Ok(default_coverages());
    }
    text.split(',')
        .map(|c| {
            let v: f64 =
                c.trim().parse().map_err(|_| CliError::Usage(format!("coverage {c:?} is not a number")))?;
            if (0.0..=1.0).contains(&v) {
                Ok(v)
            } else {
                Err(CliError::Usage(format!("coverage {v} is outside [0, 1]")))
            }
        })
        .collect()
}

fn check_level(level: f64) -> Result<(), CliError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(CliError::Usage(format!("level {level} must lie in (0, 1)")))
    }
}

fn print_json<W: Write, T: Serialize>(out: &mut W, value: &T) -> Result<(), CliError> {
    serde_json::to_writer_pretty(&mut *out, value).map_err(std::io::Error::other)?;
    writeln!(out)?;
    Ok(())
}

fn print_result<W: Write, T: Serialize>(out: &mut W, r: Result<T, CellError>) -> Result<(), CliError> {
    match r {
        Ok(v) => print_json(out, &v),
        Err(e) => {
            log::warn!("{}: {}", e.code, e.message);
            print_json(out, &json!({ "error": e }))
        }
    }
}

fn at_cutoff(ds: EvaluationDataset, cutoff: Option<f64>) -> Result<EvaluationDataset, CellError> {
    match cutoff {
        None => Ok(ds),
        Some(value) => {
            let cut = Cutoff { value, target_coverage: f64::NAN, achieved_coverage: f64::NAN };
            apply_policy(&ds, &cut).map_err(Into::into)
        }
    }
}

fn marked(e: RdEstimate, alpha: f64) -> RdCell {
    let mut cell = RdCell::from(e);
    cell.estimate.significant = cell.estimate.estimate.p_value < alpha;
    cell
}

fn rd_cell<E: Into<CellError>>(r: Result<RdEstimate, E>, alpha: f64) -> Cell<RdCell> {
    Cell::from_result(r.map(|e| marked(e, alpha)))
}

/// Execute a parsed command, writing results to `out`.
pub fn run<W: Write>(cli: Cli, out: &mut W) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out: path, oracle } => {
            let cfg = match &config {
                Some(p) => PipelineConfig::from_file_unchecked(p)?.synth.unwrap_or_default(),
                None => SynthConfig::default(),
            };
            let synth = generate_synth(&cfg)?;
            save_dataset(&path, &synth.dataset, &Schema::default())?;
            let oracle = oracle.unwrap_or_else(|| {
                let mut p = path.clone().into_os_string();
                p.push(".oracle.csv");
                PathBuf::from(p)
            });
            write_oracle(BufWriter::new(create(&oracle)?), &synth)?;
            log::info!("wrote {} and {}", path.display(), oracle.display());
        }
        Command::Calibrate { coverage, scores, score_col, delimiter } => {
            let cs = parse_coverages(&coverage)?;
            let schema = Schema { score: score_col, delimiter, ..Schema::default() };
            let values = read_scores(open(&scores)?, &schema)?;
            match coverage_grid(&values, &cs) {
                Ok(cutoffs) => {
                    let mut w = csv::Writer::from_writer(&mut *out);
                    w.write_record(["c", "cutoff", "achieved"]).map_err(std::io::Error::other)?;
                    for cut in cutoffs {
                        w.write_record(
                            [cut.target_coverage, cut.value, cut.achieved_coverage].map(|v| v.to_string()),
                        )
                        .map_err(std::io::Error::other)?;
                    }
                    w.flush()?;
                }
                Err(e) => print_result::<_, ()>(out, Err(e.into()))?,
            }
        }
        Command::Atd { data, cutoff, level } => {
            check_level(level)?;
            let ds = data.load()?;
            let r = at_cutoff(ds, cutoff).and_then(|ds| estimate_atd(&ds, level).map_err(Into::into));
            print_result(out, r)?;
        }
        Command::Catd { data, group, cutoff, level } => {
            check_level(level)?;
            let ds = data.load()?;
            let r =
                at_cutoff(ds, cutoff).and_then(|ds| estimate_catd(&ds, &group, level).map_err(Into::into));
            print_result(out, r)?;
        }
        Command::Rd { data, cutoff, bandwidth, kernel, level } => {
            check_level(level)?;
            let ds = data.load()?;
            let r = at_cutoff(ds, Some(cutoff)).and_then(|ds| {
                estimate_rd(&ds, cutoff, bandwidth, kernel.into(), level)
                    .map(|e| marked(e, 1.0 - level))
                    .map_err(Into::into)
            });
            print_result(out, r)?;
        }
        Command::Falsify {
            data,
            cutoff,
            placebo_seeds,
            seed,
            placebo_p,
            bandwidth,
            kernel,
            window,
            level,
            histogram,
        } => {
            check_level(level)?;
            let ds = match at_cutoff(data.load()?, Some(cutoff)) {
                Ok(ds) => ds,
                Err(e) => return print_result::<_, ()>(out, Err(e)),
            };
            let kernel = Kernel::from(kernel);
            let alpha = 1.0 - level;
            let placebo =
                Cell::from_result(placebo_cutoff_test(&ds, cutoff, bandwidth, kernel, level).map(|t| {
                    PlaceboCutoffCell {
                        kappa_low: t.cutoffs.kappa_low,
                        kappa_high: t.cutoffs.kappa_high,
                        low: rd_cell(t.low, alpha),
                        high: rd_cell(t.high, alpha),
                    }
                }));
            serde_json::to_writer(&mut *out, &json!({ "test": "placebo_cutoff", "result": placebo }))
                .map_err(std::io::Error::other)?;
            writeln!(out)?;
            for s in seed..seed.saturating_add(placebo_seeds) {
                let r =
                    rd_cell(placebo_outcome_test(&ds, cutoff, placebo_p, s, bandwidth, kernel, level), alpha);
                serde_json::to_writer(
                    &mut *out,
                    &json!({ "test": "placebo_outcome", "seed": s, "result": r }),
                )
                .map_err(std::io::Error::other)?;
                writeln!(out)?;
            }
            let density = density_test(&ds.scores(), cutoff, window);
            if let (Some(path), Ok(d)) = (&histogram, &density) {
                write_histogram(path, 1.0 - d.n_right as f64 / ds.len() as f64, cutoff, d)?;
            }
            serde_json::to_writer(
                &mut *out,
                &json!({ "test": "density", "result": Cell::from_result(density.map(|d| {
                    let significant = d.p_value < alpha;
                    DensityCell { result: d, significant }
                })) }),
            )
            .map_err(std::io::Error::other)?;
            writeln!(out)?;
        }
        Command::Report { config, format, out: path, plot_dir, family_size } => {
            let mut cfg = PipelineConfig::from_file(&config)?;
            if family_size.is_some() {
                cfg.family_size = family_size;
            }
            cfg.validate()?;
            let report = run_pipeline(&cfg)?;
            match &path {
                Some(p) => emit_report(&report, format, BufWriter::new(create(p)?))?,
                None => emit_report(&report, format, &mut *out)?,
            }
            if let Some(dir) = plot_dir {
                emit_plotdata(&report, &dir)?;
            }
        }
    }
    Ok(())
}
