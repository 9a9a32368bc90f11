use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::model::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adam with beta1 0.9, beta2 0.999, eps 1e-8.
    #[default]
    Adam,
    /// Plain stochastic gradient descent.
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(format!("unknown optimizer '{s}' (expected adam or sgd)")),
        }
    }
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPS: f32 = 1e-8;

/// First-order optimizer with its running state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub step: u64,
    /// Adam first and second moments; empty for SGD.
    pub moments: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let moments = match kind {
            OptimizerKind::Adam => params
                .iter()
                .flat_map(|p| [vec![0.0; p.len()], vec![0.0; p.len()]])
                .collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Self { kind, step: 0, moments }
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let lr = lr as f32;
        match self.kind {
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    for (p, &g) in params.data_mut(i).iter_mut().zip(grads.get(i)) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - BETA1.powi(t);
                let bc2 = 1.0 - BETA2.powi(t);
                for i in 0..params.len() {
                    let (m, v) = {
                        let (a, b) = self.moments.split_at_mut(2 * i + 1);
                        (&mut a[2 * i], &mut b[0])
                    };
                    for (((p, &g), m), v) in params.data_mut(i).iter_mut().zip(grads.get(i)).zip(m).zip(v) {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}
