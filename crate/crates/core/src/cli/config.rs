//! Flat key-value run configuration.
//!
//! Every key has a default. Values come from the defaults, then the TOML
//! file, then `--set key=value` overrides. Unknown keys and bad values are
//! collected and reported together.

use std::path::{Path, PathBuf};

use toml::Value;

use crate::data::{synth_dataset, AugmentConfig, DataError, Dataset, Normalization};
use crate::losses::LossConfig;
use crate::model::{InferencePolicy, ModelSpec};
use crate::rng;
use crate::train::{OptimizerKind, TrainConfig};

pub const OUTPUT_ENV: &str = "GRANAGE_OUT";
const DEFAULT_OUTPUT: &str = "runs";

/// Every accepted key with its meaning and default.
pub const KEYS: &[(&str, &str)] = &[
    (
        "backbone",
        "backbone id: desk, alexnet, vgg16, mobilenet_v1 (default desk)",
    ),
    ("input_size", "square input side in pixels (default 32)"),
    (
        "pretrained_weights",
        "checkpoint whose backbone tensors initialize the model (default none)",
    ),
    (
        "granularities",
        "active classification bin widths in years (default [1, 5, 10, 20])",
    ),
    ("use_regression", "include the squared-error term (default true)"),
    ("lambda", "weight of the squared-error term (default 1.0)"),
    ("initial_lr", "starting learning rate (default 1e-3)"),
    (
        "plateau_patience_epochs",
        "epochs without improvement before a decay (default 8)",
    ),
    ("lr_decay_factor", "divisor applied on each decay (default 10)"),
    ("max_epochs", "epoch budget (default 30)"),
    ("batch_size", "samples per step (default 32)"),
    (
        "seed",
        "seed for initialization, shuffling and augmentation (default 0)",
    ),
    ("optimizer", "adam or sgd (default adam)"),
    (
        "early_stop_patience",
        "stop after this many epochs without improvement (default off)",
    ),
    ("augment", "enable pad-crop-flip augmentation (default true)"),
    ("pad_pixels", "zero padding before the random crop (default 4)"),
    ("flip_probability", "horizontal mirror probability (default 0.5)"),
    (
        "normalize_mean",
        "per-channel mean subtracted after scaling to [0, 1] (default [0, 0, 0])",
    ),
    ("normalize_std", "per-channel divisor (default [1, 1, 1])"),
    (
        "train_manifest",
        "CSV manifest of the training split; synthetic data when unset",
    ),
    ("val_manifest", "CSV manifest of the validation split"),
    ("test_manifest", "CSV manifest of the test split"),
    (
        "images_root",
        "directory image paths are relative to (default: each manifest's directory)",
    ),
    ("synth_seed", "seed of the synthetic splits (default 0)"),
    ("synth_train", "synthetic training samples (default 2000)"),
    ("synth_val", "synthetic validation samples (default 500)"),
    ("synth_test", "synthetic test samples (default 500)"),
    (
        "policy",
        "expected_value, argmax_representative or regression (default expected_value)",
    ),
    ("eval_split", "split scored by eval: train, val or test (default test)"),
    (
        "output_dir",
        "where every output file goes (default $GRANAGE_OUT, else ./runs)",
    ),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(format!("expected train, val or test, got '{s}'")),
        }
    }

    fn key(&self) -> u64 {
        match self {
            SplitName::Train => 1,
            SplitName::Val => 2,
            SplitName::Test => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        seed: u64,
        train: usize,
        val: usize,
        test: usize,
    },
    Manifests {
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
        images_root: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub normalization: Normalization,
    pub data: DataSource,
    pub policy: InferencePolicy,
    pub eval_split: SplitName,
    pub output_dir: PathBuf,
}

/// Raw values before cross-key validation.
struct Draft {
    backbone: String,
    input_size: usize,
    pretrained_weights: Option<PathBuf>,
    granularities: Vec<u32>,
    use_regression: bool,
    lambda: f64,
    train: TrainConfig,
    augment: AugmentConfig,
    normalization: Normalization,
    train_manifest: Option<PathBuf>,
    val_manifest: Option<PathBuf>,
    test_manifest: Option<PathBuf>,
    images_root: Option<PathBuf>,
    synth_seed: u64,
    synth_counts: [usize; 3],
    policy: InferencePolicy,
    eval_split: SplitName,
    output_dir: PathBuf,
}

impl Draft {
    fn new() -> Self {
        let output_dir = std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT));
        let loss = LossConfig::full();
        Self {
            backbone: "desk".into(),
            input_size: 32,
            pretrained_weights: None,
            granularities: loss.active_granularities().iter().copied().collect(),
            use_regression: loss.use_regression(),
            lambda: loss.lambda(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            normalization: Normalization::default(),
            train_manifest: None,
            val_manifest: None,
            test_manifest: None,
            images_root: None,
            synth_seed: 0,
            synth_counts: [2000, 500, 500],
            policy: InferencePolicy::default(),
            eval_split: SplitName::Test,
            output_dir,
        }
    }

    fn apply(&mut self, key: &str, v: &Value) -> Result<(), String> {
        match key {
            "backbone" => self.backbone = string(v)?,
            "input_size" => self.input_size = uint(v)?,
            "pretrained_weights" => self.pretrained_weights = Some(string(v)?.into()),
            "granularities" => {
                self.granularities = array(v)?
                    .iter()
                    .map(|x| uint(x).map(|w| w as u32))
                    .collect::<Result<_, _>>()?
            }
            "use_regression" => self.use_regression = boolean(v)?,
            "lambda" => self.lambda = float(v)?,
            "initial_lr" => self.train.initial_lr = float(v)?,
            "plateau_patience_epochs" => self.train.plateau_patience_epochs = uint(v)?,
            "lr_decay_factor" => self.train.lr_decay_factor = float(v)?,
            "max_epochs" => self.train.max_epochs = uint(v)?,
            "batch_size" => self.train.batch_size = uint(v)?,
            "seed" => self.train.seed = uint(v)? as u64,
            "optimizer" => self.train.optimizer = string(v)?.parse::<OptimizerKind>()?,
            "early_stop_patience" => self.train.early_stop_patience = Some(uint(v)?),
            "augment" => self.augment.enabled = boolean(v)?,
            "pad_pixels" => self.augment.pad_pixels = uint(v)?,
            "flip_probability" => self.augment.horizontal_flip_probability = float(v)?,
            "normalize_mean" => self.normalization.mean = triple(v)?,
            "normalize_std" => self.normalization.std = triple(v)?,
            "train_manifest" => self.train_manifest = Some(string(v)?.into()),
            "val_manifest" => self.val_manifest = Some(string(v)?.into()),
            "test_manifest" => self.test_manifest = Some(string(v)?.into()),
            "images_root" => self.images_root = Some(string(v)?.into()),
            "synth_seed" => self.synth_seed = uint(v)? as u64,
            "synth_train" => self.synth_counts[0] = uint(v)?,
            "synth_val" => self.synth_counts[1] = uint(v)?,
            "synth_test" => self.synth_counts[2] = uint(v)?,
            "policy" => self.policy = string(v)?.parse()?,
            "eval_split" => self.eval_split = SplitName::parse(&string(v)?)?,
            "output_dir" => self.output_dir = string(v)?.into(),
            _ => {
                let known: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
                return Err(format!("unknown key (known keys: {})", known.join(", ")));
            }
        }
        Ok(())
    }

    fn finish(self, errors: &mut Vec<String>) -> Option<RunConfig> {
        let loss = LossConfig::new(self.granularities.iter().copied(), self.use_regression, self.lambda)
            .map_err(|e| errors.push(format!("granularities/use_regression/lambda: {e}")))
            .ok();
        let model = ModelSpec {
            backbone_id: self.backbone,
            input_size: self.input_size,
            pretrained: self.pretrained_weights.is_some(),
            pretrained_weights: self.pretrained_weights,
            ..ModelSpec::default()
        };
        let model = loss.as_ref().map(|l| model.with_branches_for(l));
        if let Some(m) = &model {
            if let Err(e) = m.validate() {
                errors.push(format!("backbone/input_size: {e}"));
            }
        }
        for (i, s) in self.normalization.std.iter().enumerate() {
            if !(*s > 0.0) {
                errors.push(format!("normalize_std: channel {i} must be positive, got {s}"));
            }
        }
        let train = TrainConfig {
            loss_config: loss.clone().unwrap_or_default(),
            augment: self.augment,
            ..self.train
        };
        errors.extend(train.problems());

        let data = match (self.train_manifest, self.val_manifest, self.test_manifest) {
            (None, None, None) => {
                for (name, n) in ["synth_train", "synth_val", "synth_test"].iter().zip(self.synth_counts) {
                    if n == 0 {
                        errors.push(format!("{name}: must be at least 1"));
                    }
                }
                let [train, val, test] = self.synth_counts;
                DataSource::Synthetic {
                    seed: self.synth_seed,
                    train,
                    val,
                    test,
                }
            }
            (Some(train), Some(val), Some(test)) => DataSource::Manifests {
                train,
                val,
                test,
                images_root: self.images_root,
            },
            _ => {
                errors.push("train_manifest/val_manifest/test_manifest: set all three or none".into());
                return None;
            }
        };
        if !errors.is_empty() {
            return None;
        }
        Some(RunConfig {
            model: model?,
            train,
            normalization: self.normalization,
            data,
            policy: self.policy,
            eval_split: self.eval_split,
            output_dir: self.output_dir,
        })
    }
}

fn string(v: &Value) -> Result<String, String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| format!("expected a string, got {v}"))
}

fn uint(v: &Value) -> Result<usize, String> {
    v.as_integer()
        .and_then(|i| usize::try_from(i).ok())
        .ok_or_else(|| format!("expected a non-negative integer, got {v}"))
}

fn float(v: &Value) -> Result<f64, String> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| format!("expected a number, got {v}"))
}

fn boolean(v: &Value) -> Result<bool, String> {
    v.as_bool().ok_or_else(|| format!("expected true or false, got {v}"))
}

fn array(v: &Value) -> Result<&Vec<Value>, String> {
    v.as_array().ok_or_else(|| format!("expected an array, got {v}"))
}

fn triple(v: &Value) -> Result<[f32; 3], String> {
    let items = array(v)?;
    if items.len() != 3 {
        return Err(format!("expected 3 numbers, got {}", items.len()));
    }
    let mut out = [0.0; 3];
    for (o, x) in out.iter_mut().zip(items) {
        *o = float(x)? as f32;
    }
    Ok(out)
}

/// Parses a `--set` value as TOML, treating anything unparseable as a bare string.
fn override_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Syntax { path: PathBuf, message: String },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` (`key=value`).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut draft = Draft::new();
        let mut errors = Vec::new();
        let mut entries: Vec<(String, Value)> = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            let table: toml::Table = toml::from_str(&text).map_err(|e| ConfigError::Syntax {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            // relative data paths resolve against the config file
            let base = path.parent().unwrap_or(Path::new(""));
            for (k, v) in table {
                let v = match (k.as_str(), &v) {
                    (
                        "train_manifest" | "val_manifest" | "test_manifest" | "images_root" | "pretrained_weights",
                        Value::String(s),
                    ) if Path::new(s).is_relative() => Value::String(base.join(s).to_string_lossy().into_owned()),
                    _ => v,
                };
                entries.push((k, v));
            }
        }
        for o in overrides {
            match o.split_once('=') {
                Some((k, v)) => entries.push((k.trim().to_string(), override_value(v.trim()))),
                None => errors.push(format!("--set {o}: expected key=value")),
            }
        }
        for (k, v) in &entries {
            if let Err(e) = draft.apply(k, v) {
                errors.push(format!("{k}: {e}"));
            }
        }
        match draft.finish(&mut errors) {
            Some(cfg) if errors.is_empty() => Ok(cfg),
            _ => Err(ConfigError::Invalid(errors)),
        }
    }

    fn synth_split(&self, split: SplitName) -> Result<Dataset, DataError> {
        let DataSource::Synthetic { seed, train, val, test } = &self.data else {
            unreachable!("synthetic source");
        };
        let n = match split {
            SplitName::Train => *train,
            SplitName::Val => *val,
            SplitName::Test => *test,
        };
        synth_dataset(n, rng::derive_seed(*seed, &[split.key()]), self.model.input_size)
    }

    pub fn load_split(&self, split: SplitName) -> Result<Dataset, DataError> {
        match &self.data {
            DataSource::Synthetic { .. } => self.synth_split(split),
            DataSource::Manifests {
                train,
                val,
                test,
                images_root,
            } => {
                let manifest = match split {
                    SplitName::Train => train,
                    SplitName::Val => val,
                    SplitName::Test => test,
                };
                let root = images_root
                    .clone()
                    .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default());
                Dataset::load(manifest, &root, self.model.input_size, &self.normalization)
            }
        }
    }
}
