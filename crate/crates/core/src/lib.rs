//! Age estimation with a shared backbone feeding several heads: softmax
//! classifiers over 1, 5, 10 and 20-year bins plus a scalar regressor,
//! trained under one summed loss.
//!
//! The crate covers label quantization, the loss and its gradients, a small
//! CPU convolutional network, data loading and augmentation, seeded training
//! with checkpoints, evaluation and the loss-ladder ablation.

// `!(a <= b)` is used on purpose so that NaN lands on the failing side.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod eval;
pub mod granularity;
pub mod losses;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use checkpoint::{Checkpoint, CheckpointError, RngState};
pub use data::{Dataset, Sample};
pub use eval::{evaluate, mae, run_ablation, AblationReport, AblationRow, EvalReport, Splits};
pub use granularity::{coarsen, make_spec, quantize, representative, AgeLabel, GranularitySpec};
pub use losses::{aggregate_loss, loss_gradients, LossBreakdown, LossConfig};
pub use model::{build_model, predict_age, BranchId, BranchOutputs, InferencePolicy, Model, ModelSpec};
pub use train::{train, TrainConfig, TrainHistory, Trainer};
