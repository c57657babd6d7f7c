//! Synthetic benchmark with known ground truth, and the minimal surrogate
//! deferring systems run on it.
//!
//! Features come from a mixture of `d` equally weighted isotropic Gaussians
//! in `d` dimensions. Two random hyperplanes define the optimal policy `g*`
//! and the optimal model `f*`. Where `g* = 0`, labels follow `f*` with
//! probability `1 − p_ml` and are uniform otherwise; where `g* = 1` they are
//! uniform. The simulated human errs at rate `p_h0` / `p_h1` on the two
//! regions. Labels are binary (`"0"`, `"1"`).
//!
//! Surrogate systems replace the trained deep models of a real deployment
//! with logistic regressions fitted by mini-batch SGD:
//!
//! * selective prediction (SP): reject score `1 − max class probability`;
//! * compare confidence (CC): reject score `P̂(human correct) − max class
//!   probability`, with the first term from a second logistic regression.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::data::{floor_count, EvaluationDataset, EvaluationRecord, Label};

/// Attempts at drawing a `g*` hyperplane that splits the sample exactly.
const MAX_CALIBRATION_ATTEMPTS: usize = 16;
/// Range of mixture-component means (per coordinate).
pub const MEAN_RANGE: (f64, f64) = (-5.0, 5.0);
/// Range of mixture-component variances.
pub const VARIANCE_RANGE: (f64, f64) = (0.5, 2.0);
/// Group attribute carrying the mixture component of each record.
pub const COMPONENT_ATTR: &str = "component";

/// Errors from generation and surrogate training.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    /// Zero samples requested.
    #[error("sample size must be positive")]
    EmptySample,
    /// Zero dimensions requested.
    #[error("dimension must be positive")]
    ZeroDimension,
    /// A probability parameter is outside [0, 1].
    #[error("{name} = {value} is outside [0, 1]")]
    InvalidProbability {
        /// Parameter name.
        name: &'static str,
        /// Offending value.
        value: f64,
    },
    /// The deferred-fraction range is not an ordered subrange of [0, 1].
    #[error("deferral fraction range ({0}, {1}) is invalid")]
    InvalidFractionRange(f64, f64),
    /// No random hyperplane split the sample at the drawn fraction.
    #[error("could not calibrate the policy hyperplane after {0} attempts")]
    CalibrationFailed(usize),
    /// A feature is NaN or infinite.
    #[error("row {0}: non-finite feature")]
    NonFiniteFeature(usize),
    /// Rows of different widths, or targets/features length mismatch.
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch {
        /// Expected length.
        expected: usize,
        /// Actual length.
        found: usize,
    },
    /// Step size not positive and finite.
    #[error("step size {0} must be positive and finite")]
    InvalidStep(f64),
    /// The training loss became non-finite.
    #[error("training diverged in epoch {0}")]
    Diverged(usize),
    /// A score input is outside [0, 1].
    #[error("probability {0} is outside [0, 1]")]
    OutOfRange(f64),
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthConfig {
    /// Feature dimension and number of mixture components.
    pub d: usize,
    /// Sample size.
    pub n: usize,
    /// Human error rate where `g* = 0`.
    pub p_h0: f64,
    /// Human error rate where `g* = 1`.
    pub p_h1: f64,
    /// Label noise rate where `g* = 0`.
    pub p_ml: f64,
    /// Range of the fraction of instances with `g* = 0`.
    pub defer_frac_range: (f64, f64),
    /// Seed of the ChaCha8 stream.
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d: 10,
            n: 50_000,
            p_h0: 0.10,
            p_h1: 0.10,
            p_ml: 0.40,
            defer_frac_range: (0.20, 0.80),
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.n == 0 {
            return Err(SynthError::EmptySample);
        }
        if self.d == 0 {
            return Err(SynthError::ZeroDimension);
        }
        for (name, value) in [("p_h0", self.p_h0), ("p_h1", self.p_h1), ("p_ml", self.p_ml)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SynthError::InvalidProbability { name, value });
            }
        }
        let (lo, hi) = self.defer_frac_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(SynthError::InvalidFractionRange(lo, hi));
        }
        Ok(())
    }
}

/// Ground truth attached to one generated record.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OracleRecord {
    /// Optimal policy: `true` where deferring is optimal.
    pub g_star: bool,
    /// Prediction of the optimal model.
    pub f_star_pred: Label,
    /// Mixture component the features came from.
    pub component: usize,
    /// Probability that the human is correct.
    pub human_correct_prob: f64,
    /// Probability that the label equals `f*(x)`.
    pub f_star_correct_prob: f64,
}

impl OracleRecord {
    /// Probability that an arbitrary binary prediction is correct.
    pub fn correct_prob(&self, pred: &Label) -> f64 {
        if *pred == self.f_star_pred {
            self.f_star_correct_prob
        } else {
            1.0 - self.f_star_correct_prob
        }
    }
}

/// A generated sample: the evaluation records plus features and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// Records with `model_pred = f*(x)`, the signed distance to the `g*`
    /// hyperplane as reject score, and `deferred = g*`.
    pub dataset: EvaluationDataset,
    /// Feature vectors, aligned with the records.
    pub features: Vec<Vec<f64>>,
    /// Ground truth, aligned with the records.
    pub oracle: Vec<OracleRecord>,
    /// Configuration the sample was drawn from.
    pub config: SynthConfig,
}

impl SyntheticDataset {
    /// True ATD of `ds` given its model predictions: mean over deferred
    /// records of `P(human correct) − P(model correct)`. `rows[i]` is the
    /// index in this sample of record `i` of `ds`. `None` if nothing is
    /// deferred.
    pub fn oracle_atd(&self, ds: &EvaluationDataset, rows: &[usize]) -> Option<f64> {
        let (sum, n1) = ds.records().iter().zip(rows).filter(|(r, _)| r.deferred).fold(
            (0.0, 0usize),
            |(sum, n1), (r, &row)| {
                let o = &self.oracle[row];
                let model = r.model_pred.as_ref().map_or(0.0, |p| o.correct_prob(p));
                (sum + o.human_correct_prob - model, n1 + 1)
            },
        );
        (n1 > 0).then(|| sum / n1 as f64)
    }
}

fn binary_label(bit: bool) -> Label {
    Label::from(if bit { "1" } else { "0" })
}

fn gaussian_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draw a synthetic sample.
pub fn generate_synth(cfg: &SynthConfig) -> Result<SyntheticDataset, SynthError> {
    cfg.validate()?;
    let SynthConfig { d, n, .. } = *cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let means: Vec<Vec<f64>> =
        (0..d).map(|_| (0..d).map(|_| rng.random_range(MEAN_RANGE.0..MEAN_RANGE.1)).collect()).collect();
    let sds: Vec<f64> =
        (0..d).map(|_| libm::sqrt(rng.random_range(VARIANCE_RANGE.0..VARIANCE_RANGE.1))).collect();
    let mut components = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..d);
        let x: Vec<f64> = means[c]
            .iter()
            .map(|m| m + sds[c] * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect();
        components.push(c);
        features.push(x);
    }

    // f*: random direction through the median projection.
    let w_f = gaussian_vector(&mut rng, d);
    let proj_f: Vec<f64> = features.iter().map(|x| dot(&w_f, x)).collect();
    let mut sorted = proj_f.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let f_offset = sorted[n / 2];
    let f_star: Vec<bool> = proj_f.iter().map(|&p| p >= f_offset).collect();

    // g*: unit normal, offset at the order statistic giving the drawn
    // fraction of g* = 0 instances exactly.
    let (lo, hi) = cfg.defer_frac_range;
    let mut distance = None;
    for _ in 0..MAX_CALIBRATION_ATTEMPTS {
        let mut w_g = gaussian_vector(&mut rng, d);
        let norm = libm::sqrt(dot(&w_g, &w_g));
        if norm == 0.0 {
            continue;
        }
        w_g.iter_mut().for_each(|w| *w /= norm);
        let frac0 = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let n0 = floor_count(frac0, n).min(n - 1);
        let proj: Vec<f64> = features.iter().map(|x| dot(&w_g, x)).collect();
        let mut sorted = proj.clone();
        sorted.sort_unstable_by(f64::total_cmp);
        let offset = sorted[n0];
        if sorted.partition_point(|&p| p < offset) == n0 {
            distance = Some(proj.iter().map(|p| p - offset).collect::<Vec<f64>>());
            break;
        }
    }
    let distance = distance.ok_or(SynthError::CalibrationFailed(MAX_CALIBRATION_ATTEMPTS))?;

    let f_star_correct = |g_star: bool| if g_star { 0.5 } else { 1.0 - cfg.p_ml / 2.0 };
    let mut records = Vec::with_capacity(n);
    let mut oracle = Vec::with_capacity(n);
    for i in 0..n {
        let g_star = distance[i] >= 0.0;
        let y = if !g_star && rng.random::<f64>() >= cfg.p_ml { f_star[i] } else { rng.random::<bool>() };
        let human_error = if g_star { cfg.p_h1 } else { cfg.p_h0 };
        let human = if rng.random::<f64>() < human_error { !y } else { y };
        records.push(EvaluationRecord {
            reject_score: distance[i],
            deferred: g_star,
            model_pred: Some(binary_label(f_star[i])),
            human_pred: Some(binary_label(human)),
            label: binary_label(y),
            groups: BTreeMap::from([(COMPONENT_ATTR.to_string(), components[i].to_string())]),
        });
        oracle.push(OracleRecord {
            g_star,
            f_star_pred: binary_label(f_star[i]),
            component: components[i],
            human_correct_prob: 1.0 - human_error,
            f_star_correct_prob: f_star_correct(g_star),
        });
    }
    let labels = [binary_label(false), binary_label(true)].into_iter().collect();
    let dataset =
        EvaluationDataset::new(records, Some(labels)).expect("generated records are valid by construction");
    Ok(SyntheticDataset { dataset, features, oracle, config: cfg.clone() })
}

/// A binary logistic-regression model `P(class 1 | x) = σ(w·x + b)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LinearModel {
    /// Feature weights followed by the bias (length `d + 1`).
    pub weights: Vec<f64>,
    /// Labels for target 0 and target 1.
    pub classes: (Label, Label),
}

impl LinearModel {
    /// Linear predictor `w·x + b`.
    pub fn logit(&self, x: &[f64]) -> f64 {
        let (w, b) = self.weights.split_at(self.weights.len() - 1);
        dot(w, x) + b[0]
    }

    /// `P(class 1 | x)`.
    pub fn prob(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Largest class probability.
    pub fn max_prob(&self, x: &[f64]) -> f64 {
        let p = self.prob(x);
        p.max(1.0 - p)
    }

    /// Most probable class (class 1 on ties).
    pub fn predict(&self, x: &[f64]) -> &Label {
        if self.logit(x) >= 0.0 {
            &self.classes.1
        } else {
            &self.classes.0
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + libm::log1p(libm::exp(-libm::fabs(z)))
}

/// Mean logistic log-loss of `weights` (bias last) on `(features, targets)`.
pub fn log_loss(weights: &[f64], features: &[Vec<f64>], targets: &[bool]) -> f64 {
    let (w, b) = weights.split_at(weights.len() - 1);
    let total: f64 = features
        .iter()
        .zip(targets)
        .map(|(x, &y)| {
            let z = dot(w, x) + b[0];
            softplus(z) - if y { z } else { 0.0 }
        })
        .sum();
    total / features.len() as f64
}

/// Gradient of [`log_loss`] with respect to `weights`.
pub fn log_loss_gradient(weights: &[f64], features: &[Vec<f64>], targets: &[bool]) -> Vec<f64> {
    let mut grad = vec![0.0; weights.len()];
    accumulate_gradient(weights, features.iter().zip(targets), &mut grad);
    let n = features.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    grad
}

fn accumulate_gradient<'a>(
    weights: &[f64],
    batch: impl Iterator<Item = (&'a Vec<f64>, &'a bool)>,
    grad: &mut [f64],
) {
    let d = weights.len() - 1;
    for (x, &y) in batch {
        let z = dot(&weights[..d], x) + weights[d];
        let r = sigmoid(z) - if y { 1.0 } else { 0.0 };
        for (g, xj) in grad[..d].iter_mut().zip(x) {
            *g += r * xj;
        }
        grad[d] += r;
    }
}

/// Mini-batch SGD settings.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SgdConfig {
    /// Passes over the data.
    pub epochs: usize,
    /// Learning rate.
    pub step: f64,
    /// Mini-batch size.
    pub batch_size: usize,
    /// Seed of the shuffling stream.
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { epochs: 20, step: 0.1, batch_size: 64, seed: 0 }
    }
}

/// Logistic regression fitted by seeded mini-batch gradient descent on the
/// mean log-loss, starting from zero weights.
pub fn fit_logistic_sgd(
    features: &[Vec<f64>],
    targets: &[bool],
    cfg: &SgdConfig,
) -> Result<LinearModel, SynthError> {
    if features.is_empty() {
        return Err(SynthError::EmptySample);
    }
    if targets.len() != features.len() {
        return Err(SynthError::DimensionMismatch { expected: features.len(), found: targets.len() });
    }
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(SynthError::InvalidStep(cfg.step));
    }
    let d = features[0].len();
    for (row, x) in features.iter().enumerate() {
        if x.len() != d {
            return Err(SynthError::DimensionMismatch { expected: d, found: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SynthError::NonFiniteFeature(row));
        }
    }
    let mut weights = vec![0.0; d + 1];
    let mut grad = vec![0.0; d + 1];
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch_size = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            accumulate_gradient(&weights, batch.iter().map(|&i| (&features[i], &targets[i])), &mut grad);
            let scale = cfg.step / batch.len() as f64;
            for (w, g) in weights.iter_mut().zip(&grad) {
                *w -= scale * g;
            }
        }
        if !log_loss(&weights, features, targets).is_finite() {
            return Err(SynthError::Diverged(epoch));
        }
    }
    Ok(LinearModel { weights, classes: (binary_label(false), binary_label(true)) })
}

/// Selective-prediction reject score `1 − max class probability`.
pub fn reject_score_sp(model_prob_max: f64) -> Result<f64, SynthError> {
    if !(0.0..=1.0).contains(&model_prob_max) {
        return Err(SynthError::OutOfRange(model_prob_max));
    }
    Ok(1.0 - model_prob_max)
}

/// Compare-confidence reject score: estimated human correctness minus the
/// model's max class probability.
pub fn reject_score_cc(human_correct_prob: f64, model_prob_max: f64) -> Result<f64, SynthError> {
    for p in [human_correct_prob, model_prob_max] {
        if !(0.0..=1.0).contains(&p) {
            return Err(SynthError::OutOfRange(p));
        }
    }
    Ok(human_correct_prob - model_prob_max)
}

/// Per-feature standardisation fitted on a training subset.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Standardizer {
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl Standardizer {
    /// Fit on `rows`; constant features keep unit scale.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a Vec<f64>> + Clone) -> Self {
        let n = rows.clone().count().max(1) as f64;
        let d = rows.clone().next().map_or(0, Vec::len);
        let mut mean = vec![0.0; d];
        for x in rows.clone() {
            mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for x in rows {
            var.iter_mut().zip(x).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        let sd = var.into_iter().map(|v| if v > 0.0 { libm::sqrt(v) } else { 1.0 }).collect();
        Standardizer { mean, sd }
    }

    /// Standardised copy of `x`.
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.sd).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Surrogate deferring system family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Surrogate {
    /// Selective prediction.
    #[default]
    Sp,
    /// Compare confidence.
    Cc,
}

/// A trained surrogate: classifier, optional human-correctness model and the
/// feature scaling both use.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSystem {
    /// Which reject score is used.
    pub kind: Surrogate,
    /// Label classifier.
    pub model: LinearModel,
    /// Human-correctness classifier (CC only).
    pub expert: Option<LinearModel>,
    /// Feature scaling fitted on the training rows.
    pub scaler: Standardizer,
}

impl SurrogateSystem {
    /// Train on the records of `synth` listed in `train`.
    pub fn train(
        synth: &SyntheticDataset,
        train: &[usize],
        kind: Surrogate,
        sgd: &SgdConfig,
    ) -> Result<Self, SynthError> {
        let scaler = Standardizer::fit(train.iter().map(|&i| &synth.features[i]));
        let xs: Vec<Vec<f64>> = train.iter().map(|&i| scaler.transform(&synth.features[i])).collect();
        let records = synth.dataset.records();
        let ys: Vec<bool> = train.iter().map(|&i| records[i].label.as_str() == "1").collect();
        let model = fit_logistic_sgd(&xs, &ys, sgd)?;
        let expert = match kind {
            Surrogate::Sp => None,
            Surrogate::Cc => {
                let correct: Vec<bool> = train
                    .iter()
                    .map(|&i| records[i].human_pred.as_ref() == Some(&records[i].label))
                    .collect();
                let cfg = SgdConfig { seed: sgd.seed.wrapping_add(1), ..*sgd };
                Some(fit_logistic_sgd(&xs, &correct, &cfg)?)
            }
        };
        Ok(SurrogateSystem { kind, model, expert, scaler })
    }

    /// Reject score of one feature vector.
    pub fn reject_score(&self, x: &[f64]) -> f64 {
        let z = self.scaler.transform(x);
        let max_prob = self.model.max_prob(&z);
        // Probabilities from the logistic link are always inside [0, 1].
        match &self.expert {
            None => 1.0 - max_prob,
            Some(expert) => expert.prob(&z) - max_prob,
        }
    }

    /// Records of `synth` at `indices`, with this system's model predictions
    /// and reject scores; every record starts non-deferred.
    pub fn relabel(
        &self,
        synth: &SyntheticDataset,
        indices: &[usize],
    ) -> Result<EvaluationDataset, crate::data::DataError> {
        let records = indices
            .iter()
            .map(|&i| {
                let x = &synth.features[i];
                let z = self.scaler.transform(x);
                let mut r = synth.dataset.records()[i].clone();
                r.model_pred = Some(self.model.predict(&z).clone());
                r.reject_score = self.reject_score(x);
                r.deferred = false;
                r
            })
            .collect();
        synth.dataset.with_records(records)
    }
}
