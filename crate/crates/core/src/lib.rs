//! Causal evaluation of deferring systems (human-AI teams).
//!
//! A deferring system routes each instance either to an ML model or to a
//! human expert by thresholding a reject score. Viewing the routing flag as a
//! treatment and prediction correctness as the outcome turns the evaluation
//! of such a system into a causal estimation problem:
//!
//! * when the model's prediction is also logged for deferred instances
//!   ([`Scenario::S1`]), individual effects, the average treatment effect on
//!   the deferred (ATD) and its conditional variants are identified directly
//!   ([`effects`]);
//! * when only the active predictor is logged ([`Scenario::S2`]), the effect
//!   local to the deferral cutoff is estimated with a sharp regression
//!   discontinuity design ([`rd`]), checked by a falsification battery
//!   ([`falsification`]).
//!
//! The crate is `no_std` (it needs `alloc`). File formats, reports and the
//! command line live in the `defer-causal` crate.

#![cfg_attr(not(test), no_std)]
#![deny(missing_docs)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod calibration;
pub mod data;
pub mod effects;
pub mod falsification;
pub mod rd;
pub mod stats;
pub mod synthetic;

pub use calibration::{apply_policy, coverage_grid, estimate_cutoff, CalibrationError, Cutoff};
pub use data::{
    outcome_view, split_dataset, DataError, EvaluationDataset, EvaluationRecord, Label, OutcomeView,
    Scenario, Split, SplitWarning,
};
pub use effects::{
    estimate_atd, estimate_catd, individual_effects, reweight_tau_delta, system_accuracy, tau_delta,
    wald_inference, CatdEntry, EffectEstimate, EstimationError, WaldInterval,
};
pub use falsification::{
    density_test, placebo_cutoff_test, placebo_cutoff_test_points, placebo_cutoffs, placebo_outcome_test,
    placebo_outcomes, DensityTestResult, FalsificationError, HistogramBin, PlaceboCutoffTest, PlaceboCutoffs,
};
pub use rd::{
    estimate_rd, estimate_rd_points, kernel_weight, local_linear_fit, select_bandwidth, BandwidthChoice,
    BandwidthMethod, Kernel, RdError, RdEstimate, RdFit, Side,
};
pub use stats::{bonferroni_threshold, normal_cdf, normal_quantile};
pub use synthetic::{
    fit_logistic_sgd, generate_synth, reject_score_cc, reject_score_sp, LinearModel, OracleRecord, SgdConfig,
    Standardizer, Surrogate, SurrogateSystem, SynthConfig, SynthError, SyntheticDataset,
};
