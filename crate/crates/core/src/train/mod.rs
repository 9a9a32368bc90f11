//! Seeded mini-batch training with a validation-driven plateau schedule.
//!
//! Every random draw during training comes from a stream keyed by
//! `(seed, epoch[, sample index])`: the epoch shuffle, and one augmentation
//! stream per sample. Resuming from a checkpoint therefore reproduces an
//! uninterrupted run exactly.

mod history;
mod optimizer;
mod scheduler;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::history::{EpochRecord, TrainHistory};
pub use self::optimizer::{Optimizer, OptimizerKind};
pub use self::scheduler::{plateau_lr, plateau_lr_from_losses};
use crate::checkpoint::{Checkpoint, CheckpointError, RngState};
use crate::data::{augment, AugmentConfig, DataError, Dataset};
use crate::granularity::AgeLabel;
use crate::losses::{aggregate_loss_batch, loss_gradients_batch, LossBreakdown, LossConfig, LossError};
use crate::model::{BranchId, Model, ModelError};
use crate::rng;

const SHUFFLE_KEY: u64 = 0x5348_5546; // "SHUF"
const AUGMENT_KEY: u64 = 0x4155_474d; // "AUGM"

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("loss term {0} has no matching model branch")]
    BranchMismatch(BranchId),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub plateau_patience_epochs: usize,
    /// The rate is divided by this on each plateau.
    pub lr_decay_factor: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_config: LossConfig,
    pub optimizer: OptimizerKind,
    pub augment: AugmentConfig,
    /// Stop after this many epochs without a new best validation loss.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            plateau_patience_epochs: 8,
            lr_decay_factor: 10.0,
            max_epochs: 30,
            batch_size: 32,
            seed: 0,
            loss_config: LossConfig::full(),
            optimizer: OptimizerKind::Adam,
            augment: AugmentConfig::default(),
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, in field order.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            out.push(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if self.plateau_patience_epochs < 1 {
            out.push("plateau_patience_epochs must be at least 1".into());
        }
        if !(self.lr_decay_factor > 1.0 && self.lr_decay_factor.is_finite()) {
            out.push(format!("lr_decay_factor must exceed 1, got {}", self.lr_decay_factor));
        }
        if self.batch_size < 1 {
            out.push("batch_size must be at least 1".into());
        }
        if let Err(e) = self.augment.validate() {
            out.push(e.to_string());
        }
        if self.early_stop_patience == Some(0) {
            out.push("early_stop_patience must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(problems))
        }
    }
}

/// Aggregates of one pass over the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub loss: LossBreakdown,
    pub steps: usize,
}

pub struct Trainer {
    config: TrainConfig,
    checkpoint_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            config,
            checkpoint_dir: None,
        })
    }

    /// Write `last.ckpt` after every epoch and `best.ckpt` on each new best
    /// validation loss.
    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn check_branches(&self, model: &Model) -> Result<(), TrainError> {
        for b in self.config.loss_config.active_branches() {
            if !model.spec().has_branch(b) {
                return Err(TrainError::BranchMismatch(b));
            }
        }
        Ok(())
    }

    pub fn fit(&self, model: Model, train: &Dataset, val: &Dataset) -> Result<(Model, TrainHistory), TrainError> {
        let optimizer = Optimizer::new(self.config.optimizer, model.params());
        let history = TrainHistory::new(self.config.optimizer);
        self.run(model, optimizer, history, self.config.seed, train, val)
    }

    /// Continues from a checkpoint until `max_epochs` records exist.
    pub fn resume(
        &self,
        checkpoint: Checkpoint,
        train: &Dataset,
        val: &Dataset,
    ) -> Result<(Model, TrainHistory), TrainError> {
        let model = checkpoint.model()?;
        let optimizer = checkpoint.optimizer.clone();
        if optimizer.kind != self.config.optimizer {
            log::warn!(
                "checkpoint optimizer {} overrides configured {}",
                optimizer.kind,
                self.config.optimizer
            );
        }
        if checkpoint.rng.seed != self.config.seed {
            log::warn!("resuming with the checkpoint seed {}", checkpoint.rng.seed);
        }
        self.run(model, optimizer, checkpoint.history, checkpoint.rng.seed, train, val)
    }

    fn run(
        &self,
        mut model: Model,
        mut optimizer: Optimizer,
        mut history: TrainHistory,
        seed: u64,
        train: &Dataset,
        val: &Dataset,
    ) -> Result<(Model, TrainHistory), TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        if val.is_empty() {
            return Err(TrainError::EmptySplit("validation"));
        }
        self.check_branches(&model)?;
        if let Some(dir) = &self.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
                path: dir.clone(),
                source,
            })?;
        }

        let mut best = history.best_val_loss().unwrap_or(f64::INFINITY);
        let mut since_best = history
            .records
            .iter()
            .rev()
            .take_while(|r| !(r.val_loss <= best))
            .count();
        for epoch in history.len() + 1..=self.config.max_epochs {
            let started = Instant::now();
            let lr = plateau_lr(&history, &self.config);
            let stats = self.train_epoch_seeded(&mut model, &mut optimizer, train, seed, epoch, lr)?;
            let val_loss = self.evaluate_loss(&model, val)?;
            if !val_loss.aggregate.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step: stats.steps,
                });
            }
            history.records.push(EpochRecord {
                epoch,
                lr,
                train_loss: stats.loss.aggregate,
                train_per_branch: stats.loss.per_branch,
                val_loss: val_loss.aggregate,
                val_per_branch: val_loss.per_branch,
                steps: stats.steps,
                seconds: started.elapsed().as_secs_f64(),
            });
            log::info!(
                "epoch {epoch}: lr {lr:e} train {:.4} val {:.4}",
                stats.loss.aggregate,
                val_loss.aggregate
            );

            let improved = val_loss.aggregate < best;
            if improved {
                best = val_loss.aggregate;
                since_best = 0;
            } else {
                since_best += 1;
            }
            if let Some(dir) = &self.checkpoint_dir {
                let ckpt = Checkpoint::capture(
                    &model,
                    &optimizer,
                    &history,
                    RngState {
                        seed,
                        next_epoch: epoch + 1,
                    },
                );
                ckpt.save(&dir.join(LAST_CHECKPOINT))?;
                if improved {
                    ckpt.save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
            if self.config.early_stop_patience.is_some_and(|p| since_best >= p) {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
        Ok((model, history))
    }

    /// One pass over the training split at a fixed learning rate.
    pub fn train_epoch(
        &self,
        model: &mut Model,
        optimizer: &mut Optimizer,
        train: &Dataset,
        epoch: usize,
        lr: f64,
    ) -> Result<EpochStats, TrainError> {
        self.train_epoch_seeded(model, optimizer, train, self.config.seed, epoch, lr)
    }

    fn train_epoch_seeded(
        &self,
        model: &mut Model,
        optimizer: &mut Optimizer,
        train: &Dataset,
        seed: u64,
        epoch: usize,
        lr: f64,
    ) -> Result<EpochStats, TrainError> {
        let cfg = &self.config;
        let input_size = model.spec().input_size;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[SHUFFLE_KEY, epoch as u64]));

        let mut grads = model.params().zero_grads();
        let mut weighted: Vec<(usize, LossBreakdown)> = Vec::new();
        let mut steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            steps += 1;
            let mut outputs = Vec::with_capacity(batch.len());
            let mut caches = Vec::with_capacity(batch.len());
            let mut ages: Vec<AgeLabel> = Vec::with_capacity(batch.len());
            for &i in batch {
                let sample = &train.samples[i];
                let mut r = rng::stream(seed, &[AUGMENT_KEY, epoch as u64, i as u64]);
                let image = augment(&sample.image, input_size, &cfg.augment, &mut r)?;
                let (out, cache) = model.forward_train(&image)?;
                outputs.push(out);
                caches.push(cache);
                ages.push(sample.age);
            }
            let diverged = || TrainError::Diverged { epoch, step: steps };
            if outputs.iter().any(|o| !o.is_finite()) {
                return Err(diverged());
            }
            let loss = aggregate_loss_batch(&outputs, &ages, &cfg.loss_config)?;
            if !loss.aggregate.is_finite() {
                return Err(diverged());
            }
            let output_grads = loss_gradients_batch(&outputs, &ages, &cfg.loss_config)?;
            grads.fill_zero();
            for (cache, g) in caches.iter().zip(&output_grads) {
                model.backward(cache, g, &mut grads);
            }
            if !grads.is_finite() {
                return Err(diverged());
            }
            optimizer.apply(model.params_mut(), &grads, lr);
            weighted.push((batch.len(), loss));
        }
        Ok(EpochStats {
            loss: sample_weighted_mean(&weighted),
            steps,
        })
    }

    /// Mean loss over a split with augmentation off.
    pub fn evaluate_loss(&self, model: &Model, data: &Dataset) -> Result<LossBreakdown, TrainError> {
        let mut weighted = Vec::new();
        for chunk in data.samples.chunks(self.config.batch_size.max(1)) {
            let images: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
            let ages: Vec<AgeLabel> = chunk.iter().map(|s| s.age).collect();
            let outputs = model.forward(&images)?;
            if outputs.iter().any(|o| !o.is_finite()) {
                return Ok(LossBreakdown {
                    per_branch: Default::default(),
                    aggregate: f64::NAN,
                });
            }
            weighted.push((
                chunk.len(),
                aggregate_loss_batch(&outputs, &ages, &self.config.loss_config)?,
            ));
        }
        Ok(sample_weighted_mean(&weighted))
    }
}

fn sample_weighted_mean(parts: &[(usize, LossBreakdown)]) -> LossBreakdown {
    let total: usize = parts.iter().map(|(n, _)| n).sum();
    let mut per_branch = std::collections::BTreeMap::new();
    let mut aggregate = 0.0;
    for (n, b) in parts {
        let w = *n as f64 / total as f64;
        aggregate += w * b.aggregate;
        for (&k, &v) in &b.per_branch {
            *per_branch.entry(k).or_insert(0.0) += w * v;
        }
    }
    LossBreakdown { per_branch, aggregate }
}

/// Trains `model` under `config` without writing checkpoints.
pub fn train(
    model: Model,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
) -> Result<(Model, TrainHistory), TrainError> {
    Trainer::new(config.clone())?.fit(model, train_set, val_set)
}

/// Saves model parameters, optimizer state, history and generator state.
pub fn save_checkpoint(
    model: &Model,
    optimizer: &Optimizer,
    history: &TrainHistory,
    seed: u64,
    path: &Path,
) -> Result<(), CheckpointError> {
    Checkpoint::capture(
        model,
        optimizer,
        history,
        RngState {
            seed,
            next_epoch: history.len() + 1,
        },
    )
    .save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainHistory), CheckpointError> {
    let ckpt = Checkpoint::load(path)?;
    Ok((ckpt.model()?, ckpt.history))
}
