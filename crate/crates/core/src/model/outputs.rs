use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::granularity::{AGE_MAX, AGE_MIN};

/// Identifies one output head: a classification branch by bin width, or the
/// regression node. Orders finest classification first, regression last.
/// Serializes as its label so it can key JSON maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum BranchId {
    Classification(u32),
    Regression,
}

impl BranchId {
    /// Column label used in reports: `ce100`, `ce20`, ..., `mse`.
    pub fn label(&self) -> String {
        match self {
            BranchId::Classification(w) => format!("ce{}", (AGE_MAX - AGE_MIN + 1) / w.max(&1)),
            BranchId::Regression => "mse".to_string(),
        }
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl From<BranchId> for String {
    fn from(b: BranchId) -> Self {
        b.label()
    }
}

impl TryFrom<String> for BranchId {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for BranchId {
    type Err = String;

    /// Accepts `mse`, a class count (`100`, `20`, ...) or a `ce`-prefixed class count.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("mse") || s.eq_ignore_ascii_case("regression") {
            return Ok(BranchId::Regression);
        }
        let digits = s.strip_prefix("ce").unwrap_or(s);
        let classes: u32 = digits
            .parse()
            .map_err(|_| format!("unknown branch '{s}' (expected a class count or 'mse')"))?;
        let span = AGE_MAX - AGE_MIN + 1;
        if classes == 0 || !span.is_multiple_of(classes) {
            return Err(format!("{classes} classes do not evenly divide {span} years"));
        }
        Ok(BranchId::Classification(span / classes))
    }
}

/// Raw outputs of every head for a single input.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BranchOutputs {
    /// Logit vector per bin width.
    pub class_logits: BTreeMap<u32, Vec<f64>>,
    pub regression: Option<f64>,
}

impl BranchOutputs {
    pub fn branches(&self) -> Vec<BranchId> {
        let mut ids: Vec<BranchId> = self.class_logits.keys().map(|&w| BranchId::Classification(w)).collect();
        if self.regression.is_some() {
            ids.push(BranchId::Regression);
        }
        ids
    }

    pub fn logits(&self, bin_width: u32) -> Option<&[f64]> {
        self.class_logits.get(&bin_width).map(Vec::as_slice)
    }

    pub fn has(&self, branch: BranchId) -> bool {
        match branch {
            BranchId::Classification(w) => self.class_logits.contains_key(&w),
            BranchId::Regression => self.regression.is_some(),
        }
    }

    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            class_logits: self
                .class_logits
                .iter()
                .map(|(&w, v)| (w, vec![0.0; v.len()]))
                .collect(),
            regression: self.regression.map(|_| 0.0),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.class_logits.values().flatten().all(|v| v.is_finite()) && self.regression.is_none_or(f64::is_finite)
    }
}
