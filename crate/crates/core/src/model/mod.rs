//! Shared-backbone network with one dense head per label granularity plus a
//! linear regression node, and the policies that turn head outputs into an age.

pub mod backbone;
pub mod layers;
mod outputs;
pub mod params;

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use self::layers::{Cache, Conv2d, Dense, Layer, LayerSpec};
pub use self::outputs::{BranchId, BranchOutputs};
pub use self::params::{Grads, Param, ParamStore};
use crate::granularity::{make_spec, AGE_MAX, AGE_MIN, CANONICAL_WIDTHS};
use crate::losses::softmax;
use crate::rng;
use crate::tensor::{ImageTensor, Tensor3};

pub const INPUT_CHANNELS: usize = 3;
pub const MIN_INPUT_SIZE: usize = 32;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown backbone '{id}' (registered: {registered})")]
    UnknownBackbone { id: String, registered: String },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("backbone '{backbone}' cannot process {input_size}x{input_size} inputs")]
    InputTooSmall { backbone: String, input_size: usize },
    #[error("pretrained weights requested but not found at {}", .0.display())]
    PretrainedMissing(PathBuf),
    #[error("pretrained weights at {path}: {reason}")]
    PretrainedIncompatible { path: PathBuf, reason: String },
    #[error("input shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: [usize; 3], actual: [usize; 3] },
    #[error("model has no {0} branch")]
    MissingBranch(BranchId),
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
}

/// Architecture description; everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone_id: String,
    pub input_size: usize,
    pub branch_widths: BTreeSet<u32>,
    pub with_regression: bool,
    /// Load backbone parameters from `pretrained_weights`; heads stay randomly initialized.
    pub pretrained: bool,
    #[serde(default)]
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            backbone_id: backbone::DEFAULT_BACKBONE.to_string(),
            input_size: 224,
            branch_widths: CANONICAL_WIDTHS.into_iter().collect(),
            with_regression: true,
            pretrained: false,
            pretrained_weights: None,
        }
    }
}

impl ModelSpec {
    pub fn desk(input_size: usize) -> Self {
        Self {
            input_size,
            ..Self::default()
        }
    }

    /// Heads exactly matching the active terms of a loss configuration.
    pub fn with_branches_for(mut self, loss: &crate::losses::LossConfig) -> Self {
        self.branch_widths = loss.active_granularities().clone();
        self.with_regression = loss.use_regression();
        self
    }

    pub fn branches(&self) -> Vec<BranchId> {
        let mut ids: Vec<BranchId> = self
            .branch_widths
            .iter()
            .map(|&w| BranchId::Classification(w))
            .collect();
        if self.with_regression {
            ids.push(BranchId::Regression);
        }
        ids
    }

    pub fn has_branch(&self, branch: BranchId) -> bool {
        match branch {
            BranchId::Classification(w) => self.branch_widths.contains(&w),
            BranchId::Regression => self.with_regression,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [INPUT_CHANNELS, self.input_size, self.input_size]
    }

    /// Checks everything except the pretrained weight file.
    pub fn validate(&self) -> Result<Vec<LayerSpec>, ModelError> {
        let layers = backbone::lookup(&self.backbone_id).ok_or_else(|| ModelError::UnknownBackbone {
            id: self.backbone_id.clone(),
            registered: backbone::REGISTERED.join(", "),
        })?;
        if self.input_size < MIN_INPUT_SIZE {
            return Err(ModelError::InvalidSpec(format!(
                "input_size {} is below the minimum of {MIN_INPUT_SIZE}",
                self.input_size
            )));
        }
        if let Some(w) = self.branch_widths.iter().find(|w| !CANONICAL_WIDTHS.contains(w)) {
            return Err(ModelError::InvalidSpec(format!(
                "branch width {w} is not one of {CANONICAL_WIDTHS:?}"
            )));
        }
        if self.branch_widths.is_empty() && !self.with_regression {
            return Err(ModelError::InvalidSpec("model has no output branch".into()));
        }
        if backbone::trace_shapes(&layers, self.input_shape()).is_none() {
            return Err(ModelError::InputTooSmall {
                backbone: self.backbone_id.clone(),
                input_size: self.input_size,
            });
        }
        Ok(layers)
    }
}

/// How a predicted age is read off the branch outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferencePolicy {
    /// Softmax-weighted mean of the 100-class representatives.
    #[default]
    ExpectedValue,
    /// Representative age of the most likely 100-class bin.
    ArgmaxRepresentative,
    /// The regression node's output.
    Regression,
}

impl InferencePolicy {
    pub const ALL: [InferencePolicy; 3] = [
        InferencePolicy::ExpectedValue,
        InferencePolicy::ArgmaxRepresentative,
        InferencePolicy::Regression,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InferencePolicy::ExpectedValue => "expected_value",
            InferencePolicy::ArgmaxRepresentative => "argmax_representative",
            InferencePolicy::Regression => "regression",
        }
    }

    pub fn required_branch(&self) -> BranchId {
        match self {
            InferencePolicy::Regression => BranchId::Regression,
            _ => BranchId::Classification(1),
        }
    }
}

impl fmt::Display for InferencePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferencePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| {
            format!("unknown policy '{s}' (expected one of: expected_value, argmax_representative, regression)")
        })
    }
}

/// Softmax expectation of a branch's class representatives.
fn expected_representative(logits: &[f64], width: u32) -> f64 {
    let reps = make_spec(width).expect("canonical width").representatives();
    let mean: f64 = softmax(logits).iter().zip(&reps).map(|(p, r)| p * r).sum();
    mean.clamp(AGE_MIN as f64, AGE_MAX as f64)
}

pub fn predict_age(outputs: &BranchOutputs, policy: InferencePolicy) -> Result<f64, ModelError> {
    let missing = || ModelError::MissingBranch(policy.required_branch());
    match policy {
        InferencePolicy::ExpectedValue => {
            let logits = outputs.logits(1).ok_or_else(missing)?;
            Ok(expected_representative(logits, 1))
        }
        InferencePolicy::ArgmaxRepresentative => {
            let logits = outputs.logits(1).ok_or_else(missing)?;
            let mut best = 0;
            for (k, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = k;
                }
            }
            Ok(make_spec(1).expect("width 1").representatives()[best])
        }
        InferencePolicy::Regression => outputs.regression.ok_or_else(missing),
    }
}

/// Age read from one specific branch: softmax expectation for classification
/// branches, the raw scalar for regression.
pub fn branch_prediction(outputs: &BranchOutputs, branch: BranchId) -> Result<f64, ModelError> {
    match branch {
        BranchId::Classification(w) => outputs
            .logits(w)
            .map(|l| expected_representative(l, w))
            .ok_or(ModelError::MissingBranch(branch)),
        BranchId::Regression => outputs.regression.ok_or(ModelError::MissingBranch(branch)),
    }
}

/// Anything that maps a batch of images to branch outputs.
pub trait AgeModel {
    fn predict_outputs(&self, images: &[ImageTensor]) -> Result<Vec<BranchOutputs>, ModelError>;
    fn branches(&self) -> Vec<BranchId>;
}

/// Per-sample activations retained for the backward pass.
pub struct SampleCache {
    layer_caches: Vec<Cache>,
    features: Vec<f32>,
}

#[derive(Debug, Clone)]
struct Head {
    branch: BranchId,
    dense: Dense,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    heads: Vec<Head>,
    params: ParamStore,
    feature_dim: usize,
}

/// Whether a parameter belongs to the shared feature extractor.
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("backbone.")
}

impl Model {
    /// Lays out layers and registers parameters, filling each from `init`
    /// (called with name, shape and fan-in).
    fn assemble(spec: &ModelSpec, mut init: impl FnMut(&str, &[usize], usize) -> Vec<f32>) -> Result<Self, ModelError> {
        let layer_specs = spec.validate()?;
        let mut params = ParamStore::default();
        let mut layers = Vec::with_capacity(layer_specs.len());
        let mut channels = INPUT_CHANNELS;
        for (i, ls) in layer_specs.iter().enumerate() {
            let layer = match *ls {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    groups,
                } => {
                    let fan_in = channels / groups * kernel * kernel;
                    let wname = format!("backbone.{i}.weight");
                    let wshape = vec![out_channels, fan_in];
                    let weight = params.push(&wname, wshape.clone(), init(&wname, &wshape, fan_in));
                    let bname = format!("backbone.{i}.bias");
                    let bshape = vec![out_channels];
                    let bias = params.push(&bname, bshape.clone(), init(&bname, &bshape, fan_in));
                    let conv = Conv2d {
                        in_channels: channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                        groups,
                        weight,
                        bias,
                    };
                    channels = out_channels;
                    Layer::Conv(conv)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { kernel, stride } => Layer::MaxPool { kernel, stride },
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            };
            layers.push(layer);
        }
        let feature_dim = channels;
        let mut heads = Vec::new();
        for branch in spec.branches() {
            let out = match branch {
                BranchId::Classification(w) => make_spec(w).expect("validated").num_classes(),
                BranchId::Regression => 1,
            };
            let wname = format!("head.{branch}.weight");
            let wshape = vec![out, feature_dim];
            let weight = params.push(&wname, wshape.clone(), init(&wname, &wshape, feature_dim));
            let bname = format!("head.{branch}.bias");
            let bshape = vec![out];
            let bias = params.push(&bname, bshape.clone(), init(&bname, &bshape, feature_dim));
            heads.push(Head {
                branch,
                dense: Dense {
                    in_features: feature_dim,
                    out_features: out,
                    weight,
                    bias,
                },
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            heads,
            params,
            feature_dim,
        })
    }

    /// Rebuilds a model from saved parameters, checking names and shapes.
    pub fn from_params(spec: &ModelSpec, saved: &[Param]) -> Result<Self, ModelError> {
        let mut model = Self::assemble(spec, |_, shape, _| vec![0.0; shape.iter().product()])?;
        if saved.len() != model.params.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                saved.len()
            )));
        }
        for (dst, src) in model.params.params_mut().iter_mut().zip(saved) {
            if dst.name != src.name || dst.shape != src.shape || src.data.len() != dst.len() {
                return Err(ModelError::ParamMismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
            dst.data.clone_from(&src.data);
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Indices of the parameters owned by one head.
    pub fn head_params(&self, branch: BranchId) -> Option<[usize; 2]> {
        self.heads
            .iter()
            .find(|h| h.branch == branch)
            .map(|h| [h.dense.weight, h.dense.bias])
    }

    fn check_input(&self, image: &ImageTensor) -> Result<(), ModelError> {
        let expected = self.spec.input_shape();
        if image.shape() != expected {
            return Err(ModelError::ShapeMismatch {
                expected,
                actual: image.shape(),
            });
        }
        Ok(())
    }

    fn heads_forward(&self, features: &[f32]) -> BranchOutputs {
        let mut out = BranchOutputs::default();
        for head in &self.heads {
            let y = head.dense.forward(&self.params, features);
            match head.branch {
                BranchId::Classification(w) => {
                    out.class_logits.insert(w, y.into_iter().map(f64::from).collect());
                }
                BranchId::Regression => out.regression = Some(f64::from(y[0])),
            }
        }
        out
    }

    pub fn forward_one(&self, image: &ImageTensor) -> Result<BranchOutputs, ModelError> {
        self.forward_train(image).map(|(out, _)| out)
    }

    pub fn forward(&self, images: &[ImageTensor]) -> Result<Vec<BranchOutputs>, ModelError> {
        images.iter().map(|img| self.forward_one(img)).collect()
    }

    pub fn forward_train(&self, image: &ImageTensor) -> Result<(BranchOutputs, SampleCache), ModelError> {
        self.check_input(image)?;
        let mut x = image.clone();
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&self.params, x);
            layer_caches.push(cache);
            x = y;
        }
        let features = x.data;
        let outputs = self.heads_forward(&features);
        Ok((outputs, SampleCache { layer_caches, features }))
    }

    /// Accumulates parameter gradients given d(loss)/d(outputs).
    pub fn backward(&self, cache: &SampleCache, grad: &BranchOutputs, grads: &mut Grads) {
        let mut dfeat = vec![0.0f32; self.feature_dim];
        for head in &self.heads {
            let dout: Vec<f32> = match head.branch {
                BranchId::Classification(w) => match grad.class_logits.get(&w) {
                    Some(g) => g.iter().map(|&v| v as f32).collect(),
                    None => continue,
                },
                BranchId::Regression => match grad.regression {
                    Some(g) => vec![g as f32],
                    None => continue,
                },
            };
            head.dense
                .backward(&self.params, &cache.features, &dout, grads, &mut dfeat);
        }
        let mut d = Tensor3::from_vec(self.feature_dim, 1, 1, dfeat);
        for (i, (layer, lc)) in self.layers.iter().zip(&cache.layer_caches).enumerate().rev() {
            match layer.backward(&self.params, lc, d, grads, i > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }
}

impl AgeModel for Model {
    fn predict_outputs(&self, images: &[ImageTensor]) -> Result<Vec<BranchOutputs>, ModelError> {
        self.forward(images)
    }

    fn branches(&self) -> Vec<BranchId> {
        self.spec.branches()
    }
}

/// Builds a model with seeded random parameters. Every tensor draws from its
/// own stream keyed by name, so shared tensors initialize identically across
/// models with different head sets. The regression bias starts at the centre
/// of the age range.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ModelError> {
    let pretrained = if spec.pretrained {
        let path = spec
            .pretrained_weights
            .clone()
            .ok_or_else(|| ModelError::InvalidSpec("pretrained requested without a weight file".into()))?;
        if !path.is_file() {
            return Err(ModelError::PretrainedMissing(path));
        }
        let ckpt = crate::checkpoint::Checkpoint::load(&path).map_err(|e| ModelError::PretrainedIncompatible {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        Some((path, ckpt.params))
    } else {
        None
    };

    let mut model = Model::assemble(spec, |name, shape, fan_in| {
        let n: usize = shape.iter().product();
        let mut r = rng::stream(seed, &[rng::name_key(name)]);
        if name.ends_with(".bias") {
            let fill = if name == "head.mse.bias" {
                (AGE_MIN + AGE_MAX) as f32 / 2.0
            } else {
                0.0
            };
            return vec![fill; n];
        }
        let std = if is_backbone_param(name) {
            (2.0 / fan_in as f64).sqrt()
        } else {
            (1.0 / fan_in as f64).sqrt()
        };
        let normal = Normal::new(0.0, std).expect("positive std");
        (0..n).map(|_| normal.sample(&mut r) as f32).collect()
    })?;

    if let Some((path, saved)) = pretrained {
        let mut loaded = 0;
        for p in model.params.params_mut() {
            if !is_backbone_param(&p.name) {
                continue;
            }
            let src = saved
                .iter()
                .find(|s| s.name == p.name)
                .ok_or_else(|| ModelError::PretrainedIncompatible {
                    path: path.clone(),
                    reason: format!("missing tensor {}", p.name),
                })?;
            if src.shape != p.shape {
                return Err(ModelError::PretrainedIncompatible {
                    path: path.clone(),
                    reason: format!("{} has shape {:?}, expected {:?}", p.name, src.shape, p.shape),
                });
            }
            p.data.clone_from(&src.data);
            loaded += 1;
        }
        log::info!("loaded {loaded} backbone tensors from {}", path.display());
    }
    Ok(model)
}

/// A random image of the right shape, for smoke checks.
pub fn random_input(spec: &ModelSpec, rng: &mut impl Rng) -> ImageTensor {
    let [c, h, w] = spec.input_shape();
    Tensor3::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random::<f32>()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granularity::AgeLabel;
    use crate::losses::{aggregate_loss, loss_gradients, LossConfig};

    fn desk32() -> ModelSpec {
        ModelSpec::desk(32)
    }

    #[test]
    fn five_heads_with_expected_shapes() {
        let model = build_model(&desk32(), 1).unwrap();
        assert_eq!(model.num_heads(), 5);
        let mut r = rng::stream(3, &[]);
        let images: Vec<_> = (0..4).map(|_| random_input(model.spec(), &mut r)).collect();
        let outs = model.forward(&images).unwrap();
        assert_eq!(outs.len(), 4);
        for o in &outs {
            assert_eq!(o.class_logits[&1].len(), 100);
            assert_eq!(o.class_logits[&5].len(), 20);
            assert_eq!(o.class_logits[&10].len(), 10);
            assert_eq!(o.class_logits[&20].len(), 5);
            assert!(o.regression.is_some());
            assert!(o.is_finite());
        }
        assert!(model.forward(&[]).unwrap().is_empty());
    }

    #[test]
    fn single_head_baseline() {
        let spec = ModelSpec {
            branch_widths: [1].into(),
            with_regression: false,
            ..desk32()
        };
        let model = build_model(&spec, 1).unwrap();
        assert_eq!(model.num_heads(), 1);
        let mut r = rng::stream(3, &[]);
        let out = model.forward(&[random_input(&spec, &mut r)]).unwrap();
        assert_eq!(out[0].branches(), vec![BranchId::Classification(1)]);
    }

    #[test]
    fn seeded_builds_match() {
        let a = build_model(&desk32(), 9).unwrap();
        let b = build_model(&desk32(), 9).unwrap();
        let c = build_model(&desk32(), 10).unwrap();
        assert_eq!(a.params().to_flat(), b.params().to_flat());
        assert_ne!(a.params().to_flat(), c.params().to_flat());
    }

    #[test]
    fn shared_tensors_independent_of_head_set() {
        let full = build_model(&desk32(), 4).unwrap();
        let base = build_model(&desk32().with_branches_for(&LossConfig::baseline()), 4).unwrap();
        for p in base.params().iter() {
            let i = full.params().find(&p.name).unwrap();
            assert_eq!(full.params().data(i), p.data.as_slice(), "{}", p.name);
        }
    }

    #[test]
    fn spec_errors() {
        let bad = ModelSpec {
            backbone_id: "resnet9000".into(),
            ..desk32()
        };
        assert!(matches!(build_model(&bad, 0), Err(ModelError::UnknownBackbone { .. })));
        let small = ModelSpec {
            input_size: 16,
            ..desk32()
        };
        assert!(matches!(build_model(&small, 0), Err(ModelError::InvalidSpec(_))));
        let alex = ModelSpec {
            backbone_id: "alexnet".into(),
            ..desk32()
        };
        assert!(matches!(build_model(&alex, 0), Err(ModelError::InputTooSmall { .. })));
        let pre = ModelSpec {
            pretrained: true,
            pretrained_weights: Some("/nonexistent/weights.ckpt".into()),
            ..desk32()
        };
        match build_model(&pre, 0) {
            Err(ModelError::PretrainedMissing(p)) => assert_eq!(p, PathBuf::from("/nonexistent/weights.ckpt")),
            other => panic!("unexpected {other:?}"),
        }
        let w7 = ModelSpec {
            branch_widths: [7].into(),
            ..desk32()
        };
        assert!(matches!(build_model(&w7, 0), Err(ModelError::InvalidSpec(_))));
    }

    #[test]
    fn wrong_input_shape() {
        let model = build_model(&desk32(), 1).unwrap();
        let img = Tensor3::zeros(3, 40, 40);
        match model.forward(&[img]) {
            Err(ModelError::ShapeMismatch { expected, actual }) => {
                assert_eq!(expected, [3, 32, 32]);
                assert_eq!(actual, [3, 40, 40]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn predict_policies() {
        let mut out = BranchOutputs::default();
        let mut peaked = vec![-50.0; 100];
        peaked[43] = 50.0;
        out.class_logits.insert(1, peaked);
        assert!((predict_age(&out, InferencePolicy::ExpectedValue).unwrap() - 44.0).abs() < 1e-9);
        out.class_logits.insert(1, vec![0.0; 100]);
        assert!((predict_age(&out, InferencePolicy::ExpectedValue).unwrap() - 50.5).abs() < 1e-9);
        let mut first = vec![0.0; 100];
        first[0] = 3.0;
        out.class_logits.insert(1, first);
        assert_eq!(predict_age(&out, InferencePolicy::ArgmaxRepresentative).unwrap(), 1.0);
        assert!(matches!(
            predict_age(&out, InferencePolicy::Regression),
            Err(ModelError::MissingBranch(BranchId::Regression))
        ));
        out.regression = Some(-3.5);
        assert_eq!(predict_age(&out, InferencePolicy::Regression).unwrap(), -3.5);
    }

    #[test]
    fn policy_names_roundtrip() {
        for p in InferencePolicy::ALL {
            assert_eq!(p.as_str().parse::<InferencePolicy>().unwrap(), p);
        }
        assert!("mode".parse::<InferencePolicy>().is_err());
    }

    /// Central differences of the summed loss with respect to a handful of
    /// parameters in every tensor, in f32.
    #[test]
    fn backward_matches_finite_differences() {
        let spec = ModelSpec {
            backbone_id: "desk".into(),
            ..desk32()
        };
        let mut model = build_model(&spec, 5).unwrap();
        let mut r = rng::stream(11, &[]);
        let img = random_input(&spec, &mut r);
        let age = AgeLabel::new(37.0);
        let config = LossConfig::full().with_lambda(0.01).unwrap();

        let (out, cache) = model.forward_train(&img).unwrap();
        let g = loss_gradients(&out, age, &config).unwrap();
        let mut grads = model.params().zero_grads();
        model.backward(&cache, &g, &mut grads);

        let loss = |m: &Model| {
            aggregate_loss(&m.forward_one(&img).unwrap(), age, &config)
                .unwrap()
                .aggregate
        };
        // small enough to stay clear of most ReLU kinks, large enough for f32 roundoff
        let h = 1e-3f32;
        let mut checked = 0;
        for pi in 0..model.params().len() {
            let n = model.params().get(pi).len();
            for j in [0, n / 3, n - 1] {
                let orig = model.params().data(pi)[j];
                model.params_mut().data_mut(pi)[j] = orig + h;
                let up = loss(&model);
                model.params_mut().data_mut(pi)[j] = orig - h;
                let down = loss(&model);
                model.params_mut().data_mut(pi)[j] = orig;
                let numeric = (up - down) / (2.0 * h as f64);
                let analytic = grads.get(pi)[j] as f64;
                let tolerance = 2e-3 + 2e-2 * analytic.abs();
                assert!(
                    (numeric - analytic).abs() <= tolerance,
                    "{} [{j}]: analytic {analytic} numeric {numeric}",
                    model.params().get(pi).name
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }
}
