//! Command-line entry point: `synth`, `train`, `eval`, `ablate`, `verify`.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2
//! for failures while running.

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use self::config::{ConfigError, DataSource, RunConfig, SplitName, KEYS, OUTPUT_ENV};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{export_dataset, synth_dataset, DataError};
use crate::eval::{evaluate, run_ablation, EvalError, Splits};
use crate::losses::{LossConfig, LossError};
use crate::model::{build_model, InferencePolicy, ModelError};
use crate::train::{TrainError, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT};
use crate::verify::{run_families, Family, Implementations};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const HISTORY_CSV: &str = "history.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

#[derive(Debug, Parser)]
#[command(name = "granage", version, about = "Multi-granularity age estimation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// TOML run configuration (flat keys; see README).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set max_epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic image set and its manifest.
    Synth {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: $GRANAGE_OUT/synth).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u64).range(1..))]
        size: u64,
    },
    /// Train a model; writes checkpoints and history.csv to the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from a checkpoint (default: <output_dir>/last.ckpt).
        #[arg(long, num_args = 0..=1, value_name = "CHECKPOINT")]
        resume: Option<Option<PathBuf>>,
    },
    /// Score a checkpoint; prints the MAE and writes eval_<policy>.csv.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to score (default: <output_dir>/best.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// expected_value, argmax_representative or regression.
        #[arg(long)]
        policy: Option<InferencePolicy>,
        /// Also report the MAE of every branch read on its own.
        #[arg(long)]
        per_branch: bool,
    },
    /// Train one model per loss combination and report the MAE ladder.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Loss combinations such as `100` or `100+20+mse`; the first must be `100`.
        #[arg(long, num_args = 1..)]
        ladder: Option<Vec<String>>,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        parallel: u64,
    },
    /// Check quantization, gradients, loss composition, schedule and MAE against oracles.
    Verify {
        /// Comma-separated subset of: quantize, hierarchy, gradient, composition, scheduler, mae.
        #[arg(long, value_delimiter = ',')]
        families: Vec<Family>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Train(TrainError::InvalidConfig(_)) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, contents).map_err(io)
}

fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    Ok(RunConfig::load(args.config.as_deref(), &args.overrides)?)
}

fn cmd_synth(n: u64, seed: u64, out: Option<PathBuf>, size: u64) -> Result<(), CliError> {
    let out = out.unwrap_or_else(|| default_output_root().join("synth"));
    let dataset = synth_dataset(n as usize, seed, size as usize)?;
    let manifest = export_dataset(&dataset, &out)?;
    println!("wrote {} images and {}", dataset.len(), manifest.display());
    Ok(())
}

fn cmd_train(args: &ConfigArgs, resume: Option<Option<PathBuf>>) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let trainer = Trainer::new(cfg.train.clone())?.with_checkpoint_dir(&cfg.output_dir);
    let train = cfg.load_split(SplitName::Train)?;
    let val = cfg.load_split(SplitName::Val)?;
    let (_, history) = match resume {
        None => trainer.fit(build_model(&cfg.model, cfg.train.seed)?, &train, &val)?,
        Some(path) => {
            let path = path.unwrap_or_else(|| cfg.output_dir.join(LAST_CHECKPOINT));
            let ckpt = Checkpoint::load(&path)?;
            if ckpt.model_spec != cfg.model {
                log::warn!("using the model architecture stored in {}", path.display());
            }
            println!("resuming from {} after epoch {}", path.display(), ckpt.epoch);
            trainer.resume(ckpt, &train, &val)?
        }
    };
    let history_path = cfg.output_dir.join(HISTORY_CSV);
    write_file(&history_path, &history.to_csv(false))?;
    match history.records.last() {
        Some(last) => println!(
            "trained {} epochs; final validation loss {:.6}; best {:.6}; outputs in {}",
            history.len(),
            last.val_loss,
            history.best_val_loss().unwrap_or(f64::NAN),
            cfg.output_dir.display()
        ),
        None => println!("no epochs to run (max_epochs = {})", cfg.train.max_epochs),
    }
    Ok(())
}

fn cmd_eval(
    args: &ConfigArgs,
    checkpoint: Option<PathBuf>,
    policy: Option<InferencePolicy>,
    per_branch: bool,
) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let policy = policy.unwrap_or(cfg.policy);
    let path = checkpoint.unwrap_or_else(|| cfg.output_dir.join(BEST_CHECKPOINT));
    let model = Checkpoint::load(&path)?.model()?;
    let data = cfg.load_split(cfg.eval_split)?;
    let report = evaluate(&model, &data, policy, per_branch)?;
    println!(
        "MAE {:.4} years over {} samples (policy {policy})",
        report.mae, report.sample_count
    );
    for (branch, m) in report.per_branch_mae.iter().flatten() {
        println!("  {branch:<6} {m:.4}");
    }
    write_file(&cfg.output_dir.join(format!("eval_{policy}.csv")), &report.to_csv())
}

fn cmd_ablate(args: &ConfigArgs, ladder: Option<Vec<String>>, parallel: u64) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let lambda = cfg.train.loss_config.lambda();
    let combinations = match ladder {
        None => LossConfig::default_ladder(),
        Some(items) if items.is_empty() => {
            return Err(CliError::Usage("--ladder needs at least one combination".into()))
        }
        Some(items) => items
            .iter()
            .map(|s| s.parse::<LossConfig>())
            .collect::<Result<Vec<_>, LossError>>()
            .map_err(|e| CliError::Usage(format!("--ladder: {e}")))?,
    };
    let combinations = combinations
        .into_iter()
        .map(|c| c.with_lambda(lambda))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if !combinations[0].is_baseline() {
        return Err(CliError::Usage(format!(
            "--ladder: the first combination must be 100, got {}",
            combinations[0]
        )));
    }
    let train = cfg.load_split(SplitName::Train)?;
    let val = cfg.load_split(SplitName::Val)?;
    let test = cfg.load_split(SplitName::Test)?;
    let splits = Splits {
        train: &train,
        val: &val,
        test: &test,
    };
    let report = run_ablation(&cfg.train, &cfg.model, &combinations, splits, parallel as usize)?;
    print!("{}", report.to_table());
    write_file(&cfg.output_dir.join(ABLATION_CSV), &report.to_csv())?;
    for (i, row) in report.rows.iter().enumerate() {
        if let Some(h) = &row.history {
            write_file(
                &cfg.output_dir.join(format!("ablation_cell{}_history.csv", i + 1)),
                &h.to_csv(false),
            )?;
        }
        if let Some(e) = &row.error {
            eprintln!("cell {} ({}) failed: {e}", i + 1, row.loss_combination);
        }
    }
    if report.all_failed() {
        return Err(CliError::Failed("every ablation cell failed".into()));
    }
    Ok(())
}

fn cmd_verify(families: Vec<Family>) -> Result<(), CliError> {
    let families = if families.is_empty() {
        Family::ALL.to_vec()
    } else {
        families
    };
    let results = run_families(&families, &Implementations::default());
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.family.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("failed families: {}", failed.join(", "))))
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { n, seed, out, size } => cmd_synth(n, seed, out, size),
        Command::Train { config, resume } => cmd_train(&config, resume),
        Command::Eval {
            config,
            checkpoint,
            policy,
            per_branch,
        } => cmd_eval(&config, checkpoint, policy, per_branch),
        Command::Ablate {
            config,
            ladder,
            parallel,
        } => cmd_ablate(&config, ladder, parallel),
        Command::Verify { families } => cmd_verify(families),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["granage", "synth", "--n", "0"]), EXIT_USAGE);
        assert_eq!(run(["granage", "ablate", "--ladder"]), EXIT_USAGE);
        assert_eq!(run(["granage", "verify", "--families", "nope"]), EXIT_USAGE);
        assert_eq!(run(["granage", "--help"]), EXIT_OK);
    }
}
