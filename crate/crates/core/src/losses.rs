//! Loss terms and the summed multi-granularity objective.
//!
//! The aggregate is `sum_g CE(logits_g, class_g(age)) + lambda * (y_hat - age)^2`
//! over the active classification widths `g` and, optionally, the regression
//! head. Batch variants reduce every term by the mean over samples before
//! summing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::granularity::{make_spec, quantize, AgeLabel, GranularityError, CANONICAL_WIDTHS};
use crate::model::{BranchId, BranchOutputs};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("target index {target} out of range for {classes} logits")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("missing output for branch {0}")]
    MissingBranch(BranchId),
    #[error("branch {branch} has {actual} logits, expected {expected}")]
    WrongLength {
        branch: BranchId,
        expected: usize,
        actual: usize,
    },
    #[error("batch of {outputs} outputs but {targets} targets")]
    BatchMismatch { outputs: usize, targets: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Granularity(#[from] GranularityError),
}

/// Selects which loss terms are summed, and the regression weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLossConfig", into = "RawLossConfig")]
pub struct LossConfig {
    active_granularities: BTreeSet<u32>,
    use_regression: bool,
    lambda: f64,
}

#[derive(Serialize, Deserialize)]
struct RawLossConfig {
    active_granularities: BTreeSet<u32>,
    use_regression: bool,
    lambda: f64,
}

impl TryFrom<RawLossConfig> for LossConfig {
    type Error = LossError;

    fn try_from(raw: RawLossConfig) -> Result<Self, Self::Error> {
        LossConfig::new(raw.active_granularities, raw.use_regression, raw.lambda)
    }
}

impl From<LossConfig> for RawLossConfig {
    fn from(c: LossConfig) -> Self {
        RawLossConfig {
            active_granularities: c.active_granularities,
            use_regression: c.use_regression,
            lambda: c.lambda,
        }
    }
}

impl LossConfig {
    pub fn new(widths: impl IntoIterator<Item = u32>, use_regression: bool, lambda: f64) -> Result<Self, LossError> {
        let active_granularities: BTreeSet<u32> = widths.into_iter().collect();
        for &w in &active_granularities {
            if !CANONICAL_WIDTHS.contains(&w) {
                make_spec(w)?;
                return Err(LossError::InvalidConfig(format!(
                    "bin width {w} is not one of {CANONICAL_WIDTHS:?}"
                )));
            }
        }
        if active_granularities.is_empty() && !use_regression {
            return Err(LossError::InvalidConfig("no active loss term".into()));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "lambda must be a positive finite number, got {lambda}"
            )));
        }
        Ok(Self {
            active_granularities,
            use_regression,
            lambda,
        })
    }

    /// All four classification terms plus the regression term, lambda = 1.
    pub fn full() -> Self {
        Self::new(CANONICAL_WIDTHS, true, 1.0).expect("valid")
    }

    /// The single 100-class term.
    pub fn baseline() -> Self {
        Self::new([1], false, 1.0).expect("valid")
    }

    /// The five-step ladder that adds one term at a time.
    pub fn default_ladder() -> Vec<Self> {
        let mut rows: Vec<Self> = (1..=CANONICAL_WIDTHS.len())
            .map(|n| Self::new(CANONICAL_WIDTHS[..n].iter().copied(), false, 1.0).expect("valid"))
            .collect();
        rows.push(Self::full());
        rows
    }

    pub fn with_lambda(self, lambda: f64) -> Result<Self, LossError> {
        Self::new(self.active_granularities, self.use_regression, lambda)
    }

    pub fn active_granularities(&self) -> &BTreeSet<u32> {
        &self.active_granularities
    }

    pub fn use_regression(&self) -> bool {
        self.use_regression
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of summed terms.
    pub fn num_terms(&self) -> usize {
        self.active_granularities.len() + usize::from(self.use_regression)
    }

    pub fn active_branches(&self) -> Vec<BranchId> {
        let mut ids: Vec<BranchId> = self
            .active_granularities
            .iter()
            .map(|&w| BranchId::Classification(w))
            .collect();
        if self.use_regression {
            ids.push(BranchId::Regression);
        }
        ids
    }

    pub fn is_baseline(&self) -> bool {
        !self.use_regression && self.active_granularities.len() == 1 && self.active_granularities.contains(&1)
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl fmt::Display for LossConfig {
    /// `100+20+10+5+mse` style, class counts finest first.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .active_branches()
            .iter()
            .map(|b| match b {
                BranchId::Classification(_) => b.label().trim_start_matches("ce").to_string(),
                BranchId::Regression => "mse".to_string(),
            })
            .collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for LossConfig {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut widths = Vec::new();
        let mut regression = false;
        for part in s.split('+').map(str::trim) {
            if part.is_empty() {
                return Err(LossError::InvalidConfig(format!("empty term in '{s}'")));
            }
            match part.parse::<BranchId>().map_err(LossError::InvalidConfig)? {
                BranchId::Classification(w) => widths.push(w),
                BranchId::Regression => regression = true,
            }
        }
        Self::new(widths, regression, 1.0)
    }
}

/// Per-branch loss values and their weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_branch: BTreeMap<BranchId, f64>,
    pub aggregate: f64,
}

fn check_finite(values: &[f64], what: &'static str) -> Result<(), LossError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFinite(what))
    }
}

/// Max-shifted log-sum-exp.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target_index: usize) -> Result<f64, LossError> {
    if target_index >= logits.len() {
        return Err(LossError::TargetOutOfRange {
            target: target_index,
            classes: logits.len(),
        });
    }
    check_finite(logits, "logits")?;
    Ok((log_sum_exp(logits) - logits[target_index]).max(0.0))
}

pub fn mse(prediction: f64, target: f64) -> Result<f64, LossError> {
    if !prediction.is_finite() || !target.is_finite() {
        return Err(LossError::NonFinite("regression"));
    }
    let d = prediction - target;
    Ok(d * d)
}

/// Mean of squared errors over paired slices.
pub fn mse_batch(predictions: &[f64], targets: &[f64]) -> Result<f64, LossError> {
    if predictions.len() != targets.len() {
        return Err(LossError::BatchMismatch {
            outputs: predictions.len(),
            targets: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut sum = 0.0;
    for (&p, &t) in predictions.iter().zip(targets) {
        sum += mse(p, t)?;
    }
    Ok(sum / predictions.len() as f64)
}

fn branch_logits(outputs: &BranchOutputs, width: u32) -> Result<(&[f64], usize), LossError> {
    let branch = BranchId::Classification(width);
    let logits = outputs.logits(width).ok_or(LossError::MissingBranch(branch))?;
    let expected = make_spec(width)?.num_classes();
    if logits.len() != expected {
        return Err(LossError::WrongLength {
            branch,
            expected,
            actual: logits.len(),
        });
    }
    Ok((logits, expected))
}

fn regression_output(outputs: &BranchOutputs) -> Result<f64, LossError> {
    outputs.regression.ok_or(LossError::MissingBranch(BranchId::Regression))
}

/// Unweighted per-branch terms for one sample; inactive branches are absent.
fn per_branch_terms(
    outputs: &BranchOutputs,
    age: AgeLabel,
    config: &LossConfig,
) -> Result<BTreeMap<BranchId, f64>, LossError> {
    let mut terms = BTreeMap::new();
    for &w in &config.active_granularities {
        let (logits, _) = branch_logits(outputs, w)?;
        let target = quantize(age, &make_spec(w)?)?;
        terms.insert(BranchId::Classification(w), cross_entropy(logits, target)?);
    }
    if config.use_regression {
        terms.insert(BranchId::Regression, mse(regression_output(outputs)?, age.years())?);
    }
    Ok(terms)
}

fn weighted_sum(terms: &BTreeMap<BranchId, f64>, lambda: f64) -> f64 {
    let mut aggregate = 0.0;
    for (branch, &value) in terms {
        aggregate += match branch {
            BranchId::Classification(_) => value,
            BranchId::Regression => lambda * value,
        };
    }
    aggregate
}

pub fn aggregate_loss(outputs: &BranchOutputs, age: AgeLabel, config: &LossConfig) -> Result<LossBreakdown, LossError> {
    let per_branch = per_branch_terms(outputs, age, config)?;
    let aggregate = weighted_sum(&per_branch, config.lambda);
    Ok(LossBreakdown { per_branch, aggregate })
}

/// Mean-reduced breakdown over a batch.
pub fn aggregate_loss_batch(
    outputs: &[BranchOutputs],
    ages: &[AgeLabel],
    config: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    if outputs.len() != ages.len() {
        return Err(LossError::BatchMismatch {
            outputs: outputs.len(),
            targets: ages.len(),
        });
    }
    if outputs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut sums: BTreeMap<BranchId, f64> = BTreeMap::new();
    for (out, &age) in outputs.iter().zip(ages) {
        for (branch, value) in per_branch_terms(out, age, config)? {
            *sums.entry(branch).or_insert(0.0) += value;
        }
    }
    let n = outputs.len() as f64;
    let per_branch: BTreeMap<BranchId, f64> = sums.into_iter().map(|(b, s)| (b, s / n)).collect();
    let aggregate = weighted_sum(&per_branch, config.lambda);
    Ok(LossBreakdown { per_branch, aggregate })
}

/// Gradient of [`aggregate_loss`] with respect to every output, scaled by `scale`.
fn gradients_scaled(
    outputs: &BranchOutputs,
    age: AgeLabel,
    config: &LossConfig,
    scale: f64,
) -> Result<BranchOutputs, LossError> {
    let mut grads = outputs.zeros_like();
    for &w in &config.active_granularities {
        let (logits, _) = branch_logits(outputs, w)?;
        check_finite(logits, "logits")?;
        let target = quantize(age, &make_spec(w)?)?;
        let g = grads.class_logits.get_mut(&w).expect("same shape");
        for (k, (gk, p)) in g.iter_mut().zip(softmax(logits)).enumerate() {
            let onehot = if k == target { 1.0 } else { 0.0 };
            *gk = scale * (p - onehot);
        }
    }
    if config.use_regression {
        let y_hat = regression_output(outputs)?;
        mse(y_hat, age.years())?;
        grads.regression = Some(scale * config.lambda * 2.0 * (y_hat - age.years()));
    }
    Ok(grads)
}

pub fn loss_gradients(outputs: &BranchOutputs, age: AgeLabel, config: &LossConfig) -> Result<BranchOutputs, LossError> {
    gradients_scaled(outputs, age, config, 1.0)
}

/// Per-sample gradients of the mean-reduced batch objective.
pub fn loss_gradients_batch(
    outputs: &[BranchOutputs],
    ages: &[AgeLabel],
    config: &LossConfig,
) -> Result<Vec<BranchOutputs>, LossError> {
    if outputs.len() != ages.len() {
        return Err(LossError::BatchMismatch {
            outputs: outputs.len(),
            targets: ages.len(),
        });
    }
    if outputs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let scale = 1.0 / outputs.len() as f64;
    outputs
        .iter()
        .zip(ages)
        .map(|(o, &a)| gradients_scaled(o, a, config, scale))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn uniform_outputs(regression: f64) -> BranchOutputs {
        let mut out = BranchOutputs::default();
        for w in CANONICAL_WIDTHS {
            out.class_logits.insert(w, vec![0.3; (100 / w) as usize]);
        }
        out.regression = Some(regression);
        out
    }

    #[test]
    fn uniform_cross_entropy() {
        assert_abs_diff_eq!(cross_entropy(&[1.5; 100], 17).unwrap(), 100f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(cross_entropy(&[-2.0; 5], 4).unwrap(), 5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn peaked_cross_entropy() {
        // -ln(e^10 / (e^10 + 2)), evaluated with 50-digit arithmetic.
        let expected = 9.079_573_746_724_445e-5;
        assert_abs_diff_eq!(cross_entropy(&[10.0, 0.0, 0.0], 0).unwrap(), expected, epsilon = 1e-16);
    }

    #[test]
    fn cross_entropy_errors() {
        assert_eq!(
            cross_entropy(&[0.0; 3], 3),
            Err(LossError::TargetOutOfRange { target: 3, classes: 3 })
        );
        assert_eq!(cross_entropy(&[0.0, f64::NAN], 0), Err(LossError::NonFinite("logits")));
    }

    #[test]
    fn cross_entropy_large_logits_stay_finite() {
        let l = cross_entropy(&[1000.0, -1000.0, 0.0], 1).unwrap();
        assert_abs_diff_eq!(l, 2000.0, epsilon = 1e-9);
        assert_eq!(cross_entropy(&[1000.0, -1000.0, 0.0], 0).unwrap(), 0.0);
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(44.0, 44.0).unwrap(), 0.0);
        assert_eq!(mse(40.0, 44.0).unwrap(), 16.0);
        assert_eq!(mse_batch(&[40.0, 44.0], &[44.0, 44.0]).unwrap(), 8.0);
        assert!(mse(f64::INFINITY, 1.0).is_err());
        assert!(mse_batch(&[], &[]).is_err());
    }

    #[test]
    fn aggregate_of_uniform_outputs() {
        let out = uniform_outputs(42.0);
        let b = aggregate_loss(&out, AgeLabel::new(44.0), &LossConfig::full()).unwrap();
        let expected = 100f64.ln() + 20f64.ln() + 10f64.ln() + 5f64.ln() + 4.0;
        assert_abs_diff_eq!(b.aggregate, expected, epsilon = 1e-12);
        assert_eq!(b.per_branch.len(), 5);
    }

    #[test]
    fn aggregate_of_perfect_outputs_is_zero() {
        let mut out = BranchOutputs::default();
        let age = AgeLabel::new(44.0);
        for w in CANONICAL_WIDTHS {
            let spec = make_spec(w).unwrap();
            let mut logits = vec![-1.0e4; spec.num_classes()];
            logits[quantize(age, &spec).unwrap()] = 1.0e4;
            out.class_logits.insert(w, logits);
        }
        out.regression = Some(44.0);
        let b = aggregate_loss(&out, age, &LossConfig::full()).unwrap();
        assert_eq!(b.aggregate, 0.0);
    }

    #[test]
    fn baseline_only_counts_one_branch() {
        let out = uniform_outputs(10.0);
        let b = aggregate_loss(&out, AgeLabel::new(44.0), &LossConfig::baseline()).unwrap();
        assert_eq!(b.per_branch.len(), 1);
        assert_eq!(b.aggregate, b.per_branch[&BranchId::Classification(1)]);
    }

    #[test]
    fn lambda_weights_regression() {
        let out = uniform_outputs(40.0);
        let config = LossConfig::new([], true, 0.5).unwrap();
        let b = aggregate_loss(&out, AgeLabel::new(44.0), &config).unwrap();
        assert_eq!(b.per_branch[&BranchId::Regression], 16.0);
        assert_eq!(b.aggregate, 8.0);
    }

    #[test]
    fn missing_branch_is_named() {
        let mut out = uniform_outputs(40.0);
        out.class_logits.remove(&10);
        let err = aggregate_loss(&out, AgeLabel::new(44.0), &LossConfig::full()).unwrap_err();
        assert_eq!(err, LossError::MissingBranch(BranchId::Classification(10)));
        out.regression = None;
        let err = loss_gradients(&out, AgeLabel::new(44.0), &LossConfig::new([], true, 1.0).unwrap()).unwrap_err();
        assert_eq!(err, LossError::MissingBranch(BranchId::Regression));
    }

    #[test]
    fn wrong_logit_length_rejected() {
        let mut out = uniform_outputs(40.0);
        out.class_logits.insert(5, vec![0.0; 19]);
        assert!(matches!(
            aggregate_loss(&out, AgeLabel::new(44.0), &LossConfig::full()),
            Err(LossError::WrongLength {
                expected: 20,
                actual: 19,
                ..
            })
        ));
    }

    #[test]
    fn uniform_gradient_k5() {
        let mut out = BranchOutputs::default();
        out.class_logits.insert(20, vec![0.0; 5]);
        let config = LossConfig::new([20], false, 1.0).unwrap();
        // age 50 -> class 2 at width 20
        let g = loss_gradients(&out, AgeLabel::new(50.0), &config).unwrap();
        let expected = [0.2, 0.2, -0.8, 0.2, 0.2];
        for (a, b) in g.class_logits[&20].iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn regression_gradient() {
        let out = BranchOutputs {
            regression: Some(40.0),
            ..Default::default()
        };
        let config = LossConfig::new([], true, 1.0).unwrap();
        let g = loss_gradients(&out, AgeLabel::new(44.0), &config).unwrap();
        assert_eq!(g.regression, Some(-8.0));
    }

    #[test]
    fn saturated_gradient_vanishes() {
        let mut out = BranchOutputs::default();
        let mut logits = vec![-800.0; 100];
        logits[43] = 800.0;
        out.class_logits.insert(1, logits);
        let g = loss_gradients(&out, AgeLabel::new(44.0), &LossConfig::baseline()).unwrap();
        assert!(g.class_logits[&1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inactive_branches_get_zero_gradient() {
        let out = uniform_outputs(40.0);
        let g = loss_gradients(&out, AgeLabel::new(44.0), &LossConfig::baseline()).unwrap();
        assert!(g.class_logits[&5].iter().all(|&v| v == 0.0));
        assert_eq!(g.regression, Some(0.0));
        assert!(g.class_logits[&1].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn batch_means_before_summing() {
        let a = uniform_outputs(40.0);
        let b = uniform_outputs(44.0);
        let ages = [AgeLabel::new(44.0), AgeLabel::new(44.0)];
        let config = LossConfig::new([1], true, 1.0).unwrap();
        let breakdown = aggregate_loss_batch(&[a.clone(), b.clone()], &ages, &config).unwrap();
        assert_eq!(breakdown.per_branch[&BranchId::Regression], 8.0);
        assert_abs_diff_eq!(breakdown.aggregate, 100f64.ln() + 8.0, epsilon = 1e-12);
        let grads = loss_gradients_batch(&[a, b], &ages, &config).unwrap();
        assert_eq!(grads[0].regression, Some(-4.0));
        assert_eq!(grads[1].regression, Some(0.0));
    }

    #[test]
    fn config_parsing_and_display() {
        let c: LossConfig = "100+20+10+5+mse".parse().unwrap();
        assert_eq!(c, LossConfig::full());
        assert_eq!(c.to_string(), "100+20+10+5+mse");
        assert_eq!(c.num_terms(), 5);
        assert_eq!("100".parse::<LossConfig>().unwrap(), LossConfig::baseline());
        assert!("".parse::<LossConfig>().is_err());
        assert!("100+7".parse::<LossConfig>().is_err());
        assert!(LossConfig::new([], false, 1.0).is_err());
        assert!(LossConfig::new([1], false, 0.0).is_err());
        assert!(LossConfig::new([7], false, 1.0).is_err());
        assert!(LossConfig::new([25], false, 1.0).is_err());
        let ladder: Vec<String> = LossConfig::default_ladder().iter().map(|c| c.to_string()).collect();
        assert_eq!(ladder, ["100", "100+20", "100+20+10", "100+20+10+5", "100+20+10+5+mse"]);
    }

    #[test]
    fn config_serde_validates() {
        let json = serde_json::to_string(&LossConfig::full()).unwrap();
        assert_eq!(serde_json::from_str::<LossConfig>(&json).unwrap(), LossConfig::full());
        let bad = r#"{"active_granularities":[],"use_regression":false,"lambda":1.0}"#;
        assert!(serde_json::from_str::<LossConfig>(bad).is_err());
    }
}
