use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::optimizer::OptimizerKind;
use crate::model::BranchId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_per_branch: BTreeMap<BranchId, f64>,
    pub val_loss: f64,
    pub val_per_branch: BTreeMap<BranchId, f64>,
    pub steps: usize,
    pub seconds: f64,
}

/// One record per completed epoch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub optimizer: OptimizerKind,
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn new(optimizer: OptimizerKind) -> Self {
        Self {
            optimizer,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.records
            .iter()
            .map(|r| r.val_loss)
            .filter(|v| v.is_finite())
            .fold(None, |best, v| Some(best.map_or(v, |b: f64| b.min(v))))
    }

    /// Epoch CSV: `epoch,lr,train_loss,val_loss,train_<branch>...,val_<branch>...,seconds`.
    /// Wall time is the only non-reproducible column; pass `false` to omit it.
    pub fn to_csv(&self, with_seconds: bool) -> String {
        let branches: Vec<BranchId> = self
            .records
            .first()
            .map(|r| r.train_per_branch.keys().copied().collect())
            .unwrap_or_default();
        let mut out = String::from("epoch,lr,train_loss,val_loss");
        for b in &branches {
            write!(out, ",train_{b}").unwrap();
        }
        for b in &branches {
            write!(out, ",val_{b}").unwrap();
        }
        if with_seconds {
            out.push_str(",seconds");
        }
        out.push('\n');
        let cell = |m: &BTreeMap<BranchId, f64>, b: &BranchId| m.get(b).map(f64::to_string).unwrap_or_default();
        for r in &self.records {
            write!(out, "{},{},{},{}", r.epoch, r.lr, r.train_loss, r.val_loss).unwrap();
            for b in &branches {
                write!(out, ",{}", cell(&r.train_per_branch, b)).unwrap();
            }
            for b in &branches {
                write!(out, ",{}", cell(&r.val_per_branch, b)).unwrap();
            }
            if with_seconds {
                write!(out, ",{:.3}", r.seconds).unwrap();
            }
            out.push('\n');
        }
        out
    }
}
