//! Pipeline configuration, read from a TOML key-value file.
//!
//! ```toml
//! coverages = [0.0, 0.1, 0.5, 0.9]
//! level = 0.95
//! alpha = 0.05
//! groups = ["component"]
//!
//! [synth]
//! n = 50000
//! seed = 7
//! ```
//!
//! Exactly one data source is required: `input` (a pooled file that is
//! split), `validation` and `test` files, or a `[synth]` table. Relative
//! paths are resolved against the directory of the config file.

use std::path::{Path, PathBuf};

use defer_causal_core::{Kernel, SgdConfig, SynthConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::Schema;

/// Grid used when `coverages` is not given: `0, .1, …, .9`.
pub fn default_coverages() -> Vec<f64> {
    (0..10).map(|i| f64::from(i) / 10.0).collect()
}

/// Configuration problems. These abort a run.
#[derive(Debug, Error)]
pub enum ConfigError {
    /// The file could not be read.
    #[error("cannot read {path}: {source}")]
    Read {
        /// File path.
        path: PathBuf,
        /// Underlying failure.
        source: std::io::Error,
    },
    /// The file is not valid TOML for this schema.
    #[error("invalid config: {0}")]
    Syntax(#[from] toml::de::Error),
    /// A value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Surrogate deferring system trained on a synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemChoice {
    /// Selective prediction.
    #[default]
    Sp,
    /// Compare confidence.
    Cc,
    /// The generator's own `f*` and signed distance to the `g*` hyperplane.
    Oracle,
}

/// Which estimators to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioChoice {
    /// Scenario 1 when the test data log model predictions for every record.
    #[default]
    Auto,
    /// Require model predictions for every record.
    S1,
    /// Use only the active predictor's output, even when more is logged.
    S2,
}

/// Everything a pipeline run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Pooled dataset, split into train/validation/test.
    pub input: Option<PathBuf>,
    /// Validation file (cutoff calibration).
    pub validation: Option<PathBuf>,
    /// Test file (estimation).
    pub test: Option<PathBuf>,
    /// Synthetic sample instead of files.
    pub synth: Option<SynthConfig>,
    /// Surrogate system for synthetic data.
    pub system: SystemChoice,
    /// Surrogate training settings.
    pub sgd: SgdConfig,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
    /// Seed of the split.
    pub seed: u64,
    /// Target coverages, strictly increasing in [0, 1].
    pub coverages: Vec<f64>,
    /// Confidence level of every interval.
    pub level: f64,
    /// Family-wise error rate.
    pub alpha: f64,
    /// Estimator selection.
    pub scenario: ScenarioChoice,
    /// Group attributes for conditional effects.
    pub groups: Vec<String>,
    /// RD kernel.
    pub kernel: Kernel,
    /// Fixed RD bandwidth; cross-validated when absent.
    pub bandwidth: Option<f64>,
    /// Run the falsification battery at every cutoff.
    pub falsify: bool,
    /// Success probability of placebo outcomes.
    pub placebo_p: f64,
    /// Seed of the first placebo-outcome replicate.
    pub placebo_seed: u64,
    /// Placebo-outcome replicates per cutoff.
    pub placebo_replicates: usize,
    /// Half-width of the density-test window; 10% of the score range when absent.
    pub density_window: Option<f64>,
    /// Bonferroni family size; the number of reported p-values when absent.
    pub family_size: Option<usize>,
    /// Column mapping of input files.
    pub schema: Schema,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: None,
            validation: None,
            test: None,
            synth: None,
            system: SystemChoice::default(),
            sgd: SgdConfig::default(),
            split: [0.7, 0.1, 0.2],
            seed: 0,
            coverages: default_coverages(),
            level: 0.95,
            alpha: 0.05,
            scenario: ScenarioChoice::default(),
            groups: Vec::new(),
            kernel: Kernel::default(),
            bandwidth: None,
            falsify: true,
            placebo_p: 0.5,
            placebo_seed: 0,
            placebo_replicates: 1,
            density_window: None,
            family_size: None,
            schema: Schema::default(),
        }
    }
}

fn in_open_unit(v: f64) -> bool {
    v > 0.0 && v < 1.0
}

impl PipelineConfig {
    /// Parse TOML text. Relative paths stay relative.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and validate a config file; relative paths are resolved against
    /// its directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let cfg = Self::from_file_unchecked(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file without checking that it describes a complete
    /// run, for commands that only need its `[schema]` or `[synth]` table.
    pub fn from_file_unchecked(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg: PipelineConfig = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.input, &mut cfg.validation, &mut cfg.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Check ranges and source consistency.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let sources =
            [self.input.is_some(), self.validation.is_some() || self.test.is_some(), self.synth.is_some()];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return bad("exactly one of `input`, `validation`/`test` or `[synth]` is required".into());
        }
        if self.validation.is_some() != self.test.is_some() {
            return bad("`validation` and `test` must be given together".into());
        }
        if let Some(c) = self.coverages.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return bad(format!("coverage {c} is outside [0, 1]"));
        }
        if self.coverages.windows(2).any(|w| w[0] >= w[1]) {
            return bad("coverages must be strictly increasing".into());
        }
        if !in_open_unit(self.level) {
            return bad(format!("level {} must lie in (0, 1)", self.level));
        }
        if !in_open_unit(self.alpha) {
            return bad(format!("alpha {} must lie in (0, 1)", self.alpha));
        }
        let [a, b, c] = self.split;
        if ![a, b, c].iter().all(|f| *f > 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must be positive and sum to 1", self.split));
        }
        if !(0.0..=1.0).contains(&self.placebo_p) {
            return bad(format!("placebo_p {} is outside [0, 1]", self.placebo_p));
        }
        if let Some(h) = self.bandwidth.filter(|h| !(*h > 0.0 && h.is_finite())) {
            return bad(format!("bandwidth {h} must be positive"));
        }
        if let Some(w) = self.density_window.filter(|w| !(*w > 0.0 && w.is_finite())) {
            return bad(format!("density_window {w} must be positive"));
        }
        if self.family_size == Some(0) {
            return bad("family_size must be at least 1".into());
        }
        if !(self.sgd.step > 0.0 && self.sgd.step.is_finite()) {
            return bad(format!("sgd.step {} must be positive", self.sgd.step));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_from_minimal_file() {
        let cfg = PipelineConfig::from_toml("[synth]\nn = 1000\n").unwrap();
        assert_eq!(cfg.coverages, default_coverages());
        assert_eq!(cfg.level, 0.95);
        assert_eq!(cfg.alpha, 0.05);
        assert_eq!(cfg.split, [0.7, 0.1, 0.2]);
        let synth = cfg.synth.unwrap();
        assert_eq!((synth.n, synth.d, synth.p_ml), (1000, 10, 0.4));
    }

    #[test]
    fn full_file() {
        let text = r#"
input = "pool.csv"
coverages = [0.2, 0.8]
level = 0.9
scenario = "s2"
kernel = "uniform"
bandwidth = 0.3
groups = ["sex"]
family_size = 665

[schema]
score = "k"
delimiter = ";"
labels = ["0", "1"]
"#;
        let cfg = PipelineConfig::from_toml(text).unwrap();
        assert_eq!(cfg.scenario, ScenarioChoice::S2);
        assert_eq!(cfg.kernel, Kernel::Uniform);
        assert_eq!(cfg.schema.delimiter, ';');
        assert_eq!(cfg.schema.score, "k");
        assert_eq!(cfg.family_size, Some(665));
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "",
            "input = \"a\"\n[synth]\n",
            "validation = \"v.csv\"\n",
            "input = \"a\"\ncoverages = [0.5, 0.4]",
            "input = \"a\"\ncoverages = [0.5, 0.5]",
            "input = \"a\"\ncoverages = [1.5]",
            "input = \"a\"\nlevel = 1.0",
            "input = \"a\"\nalpha = 0.0",
            "input = \"a\"\nsplit = [0.5, 0.5, 0.0]",
            "input = \"a\"\nbandwidth = -1.0",
            "input = \"a\"\nfamily_size = 0",
            "input = \"a\"\nunknown_key = 1",
        ] {
            assert!(PipelineConfig::from_toml(text).is_err(), "{text:?}");
        }
    }

    #[test]
    fn empty_grid_is_valid() {
        let cfg = PipelineConfig::from_toml("input = \"a\"\ncoverages = []").unwrap();
        assert!(cfg.coverages.is_empty());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "validation = \"v.csv\"\ntest = \"/abs/t.csv\"\n").unwrap();
        let cfg = PipelineConfig::from_file(&path).unwrap();
        assert_eq!(cfg.validation.unwrap(), dir.path().join("v.csv"));
        assert_eq!(cfg.test.unwrap(), PathBuf::from("/abs/t.csv"));
    }
}
