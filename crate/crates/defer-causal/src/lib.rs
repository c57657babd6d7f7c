//! File formats, reports and the `defer-causal` command line for the causal
//! evaluation of deferring systems.
//!
//! The estimators live in [`defer_causal_core`]; this crate reads and writes
//! datasets ([`table`]), parses run configurations ([`config`]), runs the
//! evaluation protocol over a coverage grid ([`pipeline`]) and renders the
//! result as JSON, a text table or plot-ready CSV files ([`report`]).

#![deny(missing_docs)]
#![forbid(unsafe_code)]

pub mod cli;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod table;

pub use config::{ConfigError, PipelineConfig, ScenarioChoice, SystemChoice};
pub use pipeline::{run_pipeline, PipelineError};
pub use report::{emit_plotdata, emit_report, Cell, CellError, Report, ReportFormat, Row};
pub use table::{load_dataset, read_dataset, save_dataset, write_dataset, FormatError, Schema};
