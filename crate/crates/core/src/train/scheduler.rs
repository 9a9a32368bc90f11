//! Reduce-on-plateau learning rate, as a pure function of the validation history.

use super::history::TrainHistory;
use super::TrainConfig;

/// Learning rate after a sequence of validation losses.
///
/// An epoch improves when its loss is strictly below the best loss seen since
/// the last decay. After `patience` consecutive non-improving epochs the rate
/// is divided by `factor`, and both the counter and the best-so-far reset.
/// The rate after `n` decays is `initial_lr / factor^n`, which avoids the
/// drift of dividing repeatedly.
pub fn plateau_lr_from_losses(val_losses: &[f64], initial_lr: f64, patience: usize, factor: f64) -> f64 {
    let mut decays = 0;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for &loss in val_losses {
        if loss < best {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                decays += 1;
                best = f64::INFINITY;
                stale = 0;
            }
        }
    }
    initial_lr / factor.powi(decays)
}

/// Learning rate for the epoch following the recorded ones.
pub fn plateau_lr(history: &TrainHistory, config: &TrainConfig) -> f64 {
    let losses: Vec<f64> = history.records.iter().map(|r| r.val_loss).collect();
    plateau_lr_from_losses(
        &losses,
        config.initial_lr,
        config.plateau_patience_epochs,
        config.lr_decay_factor,
    )
}
