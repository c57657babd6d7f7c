//! End-to-end evaluation: split, calibrate a coverage grid on validation
//! scores, estimate on the test set at every cutoff, run the falsification
//! battery and flag p-values against a Bonferroni threshold.
//!
//! Estimation failures are recorded in the affected cell and the run goes
//! on. Only configuration and input problems abort it.
//!
//! When the test data log only the active predictor's output, the deferral
//! flags cannot be redrawn at other cutoffs. The grid is then replaced by a
//! single row at the logged policy.

use std::collections::BTreeMap;

use defer_causal_core::data::split_indices;
use defer_causal_core::{
    apply_policy, coverage_grid, density_test, estimate_atd, estimate_catd, estimate_rd, generate_synth,
    placebo_cutoff_test, placebo_outcome_test, split_dataset, system_accuracy, CatdEntry, Cutoff, DataError,
    EvaluationDataset, Scenario, SplitWarning, Surrogate, SurrogateSystem, SynthError, SyntheticDataset,
};
use log::{info, warn};
use thiserror::Error;

use crate::config::{ConfigError, PipelineConfig, ScenarioChoice, SystemChoice};
use crate::report::{
    CatdCell, Cell, CellError, CutoffInfo, DensityCell, PlaceboCutoffCell, PlaceboOutcomeCell, RdCell,
    Report, Row,
};
use crate::table::{load_dataset, FormatError};

/// Problems that abort a run.
#[derive(Debug, Error)]
pub enum PipelineError {
    /// Invalid configuration.
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// An input file could not be read.
    #[error("{path}: {source}")]
    Input {
        /// File path.
        path: String,
        /// Underlying failure.
        source: FormatError,
    },
    /// Synthetic generation or surrogate training failed.
    #[error(transparent)]
    Synth(#[from] SynthError),
    /// The input data cannot be split or subset.
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Validation and test data plus what the report needs to know about them.
struct Prepared {
    source: String,
    validation: Option<EvaluationDataset>,
    test: EvaluationDataset,
    /// Synthetic sample and the sample index of every test record.
    oracle: Option<(SyntheticDataset, Vec<usize>)>,
    notes: Vec<String>,
}

fn load(path: &std::path::Path, cfg: &PipelineConfig) -> Result<EvaluationDataset, PipelineError> {
    load_dataset(path, &cfg.schema)
        .map_err(|source| PipelineError::Input { path: path.display().to_string(), source })
}

fn split_notes(warnings: &[SplitWarning]) -> Vec<String> {
    warnings.iter().map(|w| format!("split warning: {w:?}")).collect()
}

fn prepare(cfg: &PipelineConfig) -> Result<Prepared, PipelineError> {
    let [f_train, f_val, f_test] = cfg.split;
    if let Some(synth_cfg) = &cfg.synth {
        let synth = generate_synth(synth_cfg)?;
        let [train, val, test] = split_indices(synth.dataset.len(), (f_train, f_val, f_test), cfg.seed)?;
        let (validation, test_ds) = match cfg.system {
            SystemChoice::Oracle => {
                let pick = |idx: &[usize]| {
                    synth
                        .dataset
                        .with_records(idx.iter().map(|&i| synth.dataset.records()[i].clone()).collect())
                };
                (pick(&val)?, pick(&test)?)
            }
            SystemChoice::Sp | SystemChoice::Cc => {
                let kind = if cfg.system == SystemChoice::Sp { Surrogate::Sp } else { Surrogate::Cc };
                let system = SurrogateSystem::train(&synth, &train, kind, &cfg.sgd)?;
                (system.relabel(&synth, &val)?, system.relabel(&synth, &test)?)
            }
        };
        return Ok(Prepared {
            source: format!(
                "synthetic (n = {}, d = {}, seed = {})",
                synth_cfg.n, synth_cfg.d, synth_cfg.seed
            ),
            validation: Some(validation),
            test: test_ds,
            oracle: Some((synth, test)),
            notes: Vec::new(),
        });
    }
    if let Some(path) = &cfg.input {
        let pool = load(path, cfg)?;
        let source = path.display().to_string();
        if !pool.scenario1_capable() {
            return Ok(Prepared {
                source,
                validation: None,
                test: pool,
                oracle: None,
                notes: vec![
                    "model predictions missing for deferred records: the whole file is the test set".into()
                ],
            });
        }
        let split = split_dataset(&pool, (f_train, f_val, f_test), cfg.seed)?;
        return Ok(Prepared {
            source,
            validation: Some(split.validation),
            test: split.test,
            oracle: None,
            notes: split_notes(&split.warnings),
        });
    }
    let (Some(v), Some(t)) = (&cfg.validation, &cfg.test) else {
        return Err(ConfigError::Invalid("no data source".into()).into());
    };
    Ok(Prepared {
        source: format!("{} / {}", v.display(), t.display()),
        validation: Some(load(v, cfg)?),
        test: load(t, cfg)?,
        oracle: None,
        notes: Vec::new(),
    })
}

/// The cutoff implied by logged deferral flags: the smallest deferred score,
/// provided every non-deferred score lies below it.
fn logged_cutoff(test: &EvaluationDataset) -> Result<Cutoff, CellError> {
    let recs = test.records();
    let value = recs.iter().filter(|r| r.deferred).map(|r| r.reject_score).fold(f64::INFINITY, f64::min);
    let highest_kept =
        recs.iter().filter(|r| !r.deferred).map(|r| r.reject_score).fold(f64::NEG_INFINITY, f64::max);
    if highest_kept >= value {
        return Err(CellError::new(
            "policy_not_sharp",
            format!("a non-deferred score ({highest_kept}) is not below the lowest deferred score ({value})"),
        ));
    }
    let coverage = recs.iter().filter(|r| !r.deferred).count() as f64 / recs.len().max(1) as f64;
    Ok(Cutoff { value, target_coverage: coverage, achieved_coverage: coverage })
}

fn rd_cell(r: Result<defer_causal_core::RdEstimate, impl Into<CellError>>) -> Cell<RdCell> {
    match r {
        Ok(e) => Cell::Ok(e.into()),
        Err(e) => Cell::Error(e.into()),
    }
}

/// Everything estimated at one cutoff.
fn estimate_row(
    cfg: &PipelineConfig,
    scenario: Scenario,
    prepared: &Prepared,
    coverage: f64,
    cutoff: Cutoff,
    skip_local: bool,
) -> Row {
    let test = &prepared.test;
    let ds = match apply_policy(test, &cutoff) {
        Ok(ds) => ds,
        Err(e) => {
            let mut row = Row::unavailable(coverage, Cell::Error(e.into()), "cutoff failed");
            row.catd =
                cfg.groups.iter().map(|g| (g.clone(), Cell::Unavailable("cutoff failed".into()))).collect();
            return row;
        }
    };
    let n_deferred = ds.n_deferred();
    let cutoff_info = CutoffInfo {
        value: cutoff.value,
        validation_coverage: prepared
            .validation
            .as_ref()
            .filter(|_| test.scenario1_capable())
            .map(|_| cutoff.achieved_coverage),
        test_coverage: (ds.len() - n_deferred) as f64 / ds.len().max(1) as f64,
        n_deferred,
    };
    let mut row = Row::unavailable(coverage, Cell::Ok(cutoff_info), "");
    row.accuracy = Cell::from_result(system_accuracy(&ds));

    if scenario == Scenario::S1 {
        row.atd = Cell::from_result(estimate_atd(&ds, cfg.level).map(Into::into));
        for g in &cfg.groups {
            let cell = estimate_catd(&ds, g, cfg.level).map(|m| {
                m.into_iter()
                    .map(|(value, entry)| {
                        let cell = match entry {
                            CatdEntry::Estimated(e) => CatdCell {
                                n_deferred: e.n_used,
                                point: Some(e.point),
                                estimate: Some(e.into()),
                            },
                            CatdEntry::Unavailable { n_deferred, point } => {
                                CatdCell { n_deferred, point, estimate: None }
                            }
                        };
                        (value, cell)
                    })
                    .collect::<BTreeMap<_, _>>()
            });
            row.catd.insert(g.clone(), Cell::from_result(cell));
        }
        if let Some((synth, rows)) = &prepared.oracle {
            row.oracle_atd = synth.oracle_atd(&ds, rows);
        }
    } else {
        row.atd = Cell::Unavailable("scenario".into());
        row.catd = cfg.groups.iter().map(|g| (g.clone(), Cell::Unavailable("scenario".into()))).collect();
    }

    if skip_local {
        let reason = "zero coverage: no cutoff inside the score range";
        row.rd = Cell::Unavailable(reason.into());
        row.placebo_cutoff = Cell::Unavailable(reason.into());
        row.placebo_outcome = Cell::Unavailable(reason.into());
        row.density = Cell::Unavailable(reason.into());
        return row;
    }
    row.rd = rd_cell(estimate_rd(&ds, cutoff.value, cfg.bandwidth, cfg.kernel, cfg.level));
    if !cfg.falsify {
        let reason = "falsification disabled";
        row.placebo_cutoff = Cell::Unavailable(reason.into());
        row.placebo_outcome = Cell::Unavailable(reason.into());
        row.density = Cell::Unavailable(reason.into());
        return row;
    }
    row.placebo_cutoff =
        Cell::from_result(placebo_cutoff_test(&ds, cutoff.value, cfg.bandwidth, cfg.kernel, cfg.level).map(
            |t| PlaceboCutoffCell {
                kappa_low: t.cutoffs.kappa_low,
                kappa_high: t.cutoffs.kappa_high,
                low: rd_cell(t.low),
                high: rd_cell(t.high),
            },
        ));
    row.placebo_outcome = Cell::Ok(
        (0..cfg.placebo_replicates as u64)
            .map(|i| {
                let seed = cfg.placebo_seed.wrapping_add(i);
                let r = placebo_outcome_test(
                    &ds,
                    cutoff.value,
                    cfg.placebo_p,
                    seed,
                    cfg.bandwidth,
                    cfg.kernel,
                    cfg.level,
                );
                PlaceboOutcomeCell { seed, result: rd_cell(r) }
            })
            .collect(),
    );
    row.density = Cell::from_result(
        density_test(&ds.scores(), cutoff.value, cfg.density_window)
            .map(|result| DensityCell { result, significant: false }),
    );
    row
}

/// Run the whole protocol.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Report, PipelineError> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    let mut notes = prepared.notes.clone();
    let capable = prepared.test.scenario1_capable();
    let scenario = match cfg.scenario {
        ScenarioChoice::S2 => Scenario::S2,
        _ if capable => Scenario::S1,
        choice => {
            if choice == ScenarioChoice::S1 {
                warn!("scenario 1 requested but model predictions are missing");
            }
            notes.push(
                "Scenario-1 estimators skipped: model predictions are not logged for deferred records".into(),
            );
            Scenario::S2
        }
    };
    info!("{}: {} test records, {:?}", prepared.source, prepared.test.len(), scenario);

    let rows = match (&prepared.validation, capable) {
        (Some(val), true) => match coverage_grid(&val.scores(), &cfg.coverages) {
            Ok(cutoffs) => cfg
                .coverages
                .iter()
                .zip(cutoffs)
                .map(|(&c, cut)| estimate_row(cfg, scenario, &prepared, c, cut, c == 0.0))
                .collect(),
            Err(e) => {
                let err = CellError::from(e);
                cfg.coverages
                    .iter()
                    .map(|&c| Row::unavailable(c, Cell::Error(err.clone()), "cutoff failed"))
                    .collect()
            }
        },
        _ => {
            notes.push("grid replaced by the logged deferral policy".into());
            let test = &prepared.test;
            let c = (test.len() - test.n_deferred()) as f64 / test.len().max(1) as f64;
            match logged_cutoff(test) {
                Ok(cut) => vec![estimate_row(cfg, scenario, &prepared, c, cut, c == 0.0)],
                Err(e) => vec![Row::unavailable(c, Cell::Error(e), "cutoff failed")],
            }
        }
    };

    let mut report = Report {
        source: prepared.source.clone(),
        system: cfg.synth.as_ref().map(|_| cfg.system),
        scenario,
        level: cfg.level,
        alpha: cfg.alpha,
        n_validation: prepared.validation.as_ref().map_or(0, EvaluationDataset::len),
        n_test: prepared.test.len(),
        notes,
        rows,
        tests_run: 0,
        family_size: 0,
        threshold: None,
    };
    report.apply_bonferroni(cfg.family_size);
    Ok(report)
}
