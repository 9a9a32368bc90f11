//! Mean absolute error, per-branch evaluation and the loss-ladder ablation.

mod ablation;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

pub use self::ablation::{run_ablation, AblationReport, AblationRow, Splits};
use crate::data::Dataset;
use crate::model::{branch_prediction, predict_age, AgeModel, BranchId, InferencePolicy, ModelError};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot compute MAE of an empty set")]
    Empty,
    #[error("{predictions} predictions for {targets} targets")]
    LengthMismatch { predictions: usize, targets: usize },
    #[error("policy {policy} needs the {branch} branch, which the model does not have")]
    MissingBranch { policy: InferencePolicy, branch: BranchId },
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error("ablation needs at least one loss combination")]
    NoCombinations,
    #[error("the first ablation combination must be the width-1 baseline, got {0}")]
    BaselineFirst(String),
}

/// `(1/K) * sum |prediction - target|`.
pub fn mae(predictions: &[f64], targets: &[f64]) -> Result<f64, EvalError> {
    if predictions.len() != targets.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            targets: targets.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let total: f64 = predictions.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mae: f64,
    pub sample_count: usize,
    pub policy: InferencePolicy,
    /// MAE of each branch read on its own.
    pub per_branch_mae: Option<BTreeMap<BranchId, f64>>,
}

impl EvalReport {
    /// One header line and one value line; floats at full precision.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("policy,sample_count,mae");
        let mut row = format!("{},{},{}", self.policy, self.sample_count, self.mae);
        for (branch, v) in self.per_branch_mae.iter().flatten() {
            write!(header, ",mae_{branch}").unwrap();
            write!(row, ",{v}").unwrap();
        }
        format!("{header}\n{row}\n")
    }
}

/// Runs the model over `dataset` (no augmentation) and scores `policy`.
pub fn evaluate<M: AgeModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    policy: InferencePolicy,
    per_branch: bool,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::Empty);
    }
    let branches = model.branches();
    let required = policy.required_branch();
    if !branches.contains(&required) {
        return Err(EvalError::MissingBranch {
            policy,
            branch: required,
        });
    }

    let mut predictions = Vec::with_capacity(dataset.len());
    let mut by_branch: BTreeMap<BranchId, Vec<f64>> = BTreeMap::new();
    for (chunk_index, chunk) in dataset.samples.chunks(EVAL_BATCH).enumerate() {
        let first = chunk_index * EVAL_BATCH;
        let images: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
        let outputs = model
            .predict_outputs(&images)
            .map_err(|source| EvalError::Sample { index: first, source })?;
        for (offset, out) in outputs.iter().enumerate() {
            let index = first + offset;
            let sample_err = |source| EvalError::Sample { index, source };
            predictions.push(predict_age(out, policy).map_err(sample_err)?);
            if per_branch {
                for &b in &branches {
                    let p = branch_prediction(out, b).map_err(sample_err)?;
                    by_branch.entry(b).or_default().push(p);
                }
            }
        }
    }

    let targets = dataset.ages();
    let per_branch_mae = if per_branch {
        let mut m = BTreeMap::new();
        for (b, preds) in &by_branch {
            m.insert(*b, mae(preds, &targets)?);
        }
        Some(m)
    } else {
        None
    };
    Ok(EvalReport {
        mae: mae(&predictions, &targets)?,
        sample_count: dataset.len(),
        policy,
        per_branch_mae,
    })
}
