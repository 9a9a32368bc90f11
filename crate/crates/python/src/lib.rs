//! Python bindings: quantization, losses, model construction and inference,
//! synthetic data, training, evaluation and the invariant checks.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use granage::checkpoint::{Checkpoint, RngState};
use granage::data::synth_dataset;
use granage::granularity::{self, make_spec, AgeLabel};
use granage::losses;
use granage::model::{self, BranchId, BranchOutputs, InferencePolicy, ModelSpec};
use granage::tensor::ImageTensor;
use granage::train::{Optimizer, TrainConfig, Trainer};
use granage::verify::{run_families, Family, Implementations};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Zero-based class of `age` at the given bin width.
#[pyfunction]
fn quantize(age: f64, bin_width: u32) -> PyResult<usize> {
    granularity::quantize(AgeLabel::new(age), &make_spec(bin_width).map_err(value_err)?).map_err(value_err)
}

/// Mean age of class `class_index` at the given bin width.
#[pyfunction]
fn representative(class_index: usize, bin_width: u32) -> PyResult<f64> {
    granularity::representative(class_index, &make_spec(bin_width).map_err(value_err)?).map_err(value_err)
}

/// Class of the coarse binning that contains fine class `fine_index`.
#[pyfunction]
fn coarsen(fine_index: usize, fine_width: u32, coarse_width: u32) -> PyResult<usize> {
    let fine = make_spec(fine_width).map_err(value_err)?;
    let coarse = make_spec(coarse_width).map_err(value_err)?;
    granularity::coarsen(fine_index, &fine, &coarse).map_err(value_err)
}

#[pyfunction]
fn mae(predictions: Vec<f64>, targets: Vec<f64>) -> PyResult<f64> {
    granage::eval::mae(&predictions, &targets).map_err(value_err)
}

fn outputs_from_py(outputs: BTreeMap<String, Vec<f64>>) -> PyResult<BranchOutputs> {
    let mut out = BranchOutputs::default();
    for (label, values) in outputs {
        match label.parse::<BranchId>().map_err(value_err)? {
            BranchId::Classification(w) => {
                out.class_logits.insert(w, values);
            }
            BranchId::Regression => {
                let [v] = values[..] else {
                    return Err(value_err("the mse output takes exactly one value"));
                };
                out.regression = Some(v);
            }
        }
    }
    Ok(out)
}

fn outputs_to_py(outputs: &BranchOutputs) -> BTreeMap<String, Vec<f64>> {
    let mut map: BTreeMap<String, Vec<f64>> = outputs
        .class_logits
        .iter()
        .map(|(&w, l)| (BranchId::Classification(w).label(), l.clone()))
        .collect();
    if let Some(r) = outputs.regression {
        map.insert(BranchId::Regression.label(), vec![r]);
    }
    map
}

/// Active loss terms, e.g. `LossConfig("100+20+mse", lam=1.0)`.
#[pyclass(name = "LossConfig", from_py_object)]
#[derive(Clone)]
struct PyLossConfig {
    inner: losses::LossConfig,
}

#[pymethods]
impl PyLossConfig {
    #[new]
    #[pyo3(signature = (terms = "100+20+10+5+mse", lam = 1.0))]
    fn new(terms: &str, lam: f64) -> PyResult<Self> {
        let inner = terms
            .parse::<losses::LossConfig>()
            .and_then(|c| c.with_lambda(lam))
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn lam(&self) -> f64 {
        self.inner.lambda()
    }

    #[getter]
    fn branches(&self) -> Vec<String> {
        self.inner.active_branches().iter().map(BranchId::label).collect()
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("LossConfig('{}', lam={})", self.inner, self.inner.lambda())
    }

    /// Per-term and total loss for one sample; `outputs` maps branch labels
    /// (`ce100`, ..., `mse`) to values.
    fn loss(&self, outputs: BTreeMap<String, Vec<f64>>, age: f64) -> PyResult<(f64, BTreeMap<String, f64>)> {
        let b =
            losses::aggregate_loss(&outputs_from_py(outputs)?, AgeLabel::new(age), &self.inner).map_err(value_err)?;
        Ok((b.aggregate, b.per_branch.iter().map(|(k, v)| (k.label(), *v)).collect()))
    }

    /// Gradient of the total loss with respect to every output.
    fn gradients(&self, outputs: BTreeMap<String, Vec<f64>>, age: f64) -> PyResult<BTreeMap<String, Vec<f64>>> {
        let g =
            losses::loss_gradients(&outputs_from_py(outputs)?, AgeLabel::new(age), &self.inner).map_err(value_err)?;
        Ok(outputs_to_py(&g))
    }
}

/// In-memory image set with age labels.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: granage::data::Dataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn ages(&self) -> Vec<f64> {
        self.inner.ages()
    }

    /// Image `index` as a flat channel-major list of floats.
    fn image(&self, index: usize) -> PyResult<Vec<f32>> {
        self.inner
            .samples
            .get(index)
            .map(|s| s.image.data.clone())
            .ok_or_else(|| value_err(format!("index {index} out of range")))
    }
}

/// `n` synthetic images of side `size` whose age is encoded in simple image statistics.
#[pyfunction]
#[pyo3(signature = (n, seed = 0, size = 32))]
fn synth(n: usize, seed: u64, size: usize) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: synth_dataset(n, seed, size).map_err(value_err)?,
    })
}

#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: model::Model,
}

fn parse_policy(policy: &str) -> PyResult<InferencePolicy> {
    policy.parse().map_err(value_err)
}

#[pymethods]
impl PyModel {
    /// Fresh seeded model with one head per active term of `loss`.
    #[new]
    #[pyo3(signature = (backbone = "desk", input_size = 32, loss = None, seed = 0))]
    fn new(backbone: &str, input_size: usize, loss: Option<PyLossConfig>, seed: u64) -> PyResult<Self> {
        let loss = loss.map(|l| l.inner).unwrap_or_default();
        let spec = ModelSpec {
            backbone_id: backbone.to_string(),
            input_size,
            ..ModelSpec::default()
        }
        .with_branches_for(&loss);
        Ok(Self {
            inner: model::build_model(&spec, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(runtime_err)?;
        Ok(Self {
            inner: ckpt.model().map_err(runtime_err)?,
        })
    }

    /// Writes a checkpoint holding the parameters only (no optimizer history).
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let optimizer = Optimizer::new(granage::train::OptimizerKind::Sgd, self.inner.params());
        Checkpoint::capture(
            &self.inner,
            &optimizer,
            &Default::default(),
            RngState { seed: 0, next_epoch: 1 },
        )
        .save(&path)
        .map_err(runtime_err)
    }

    #[getter]
    fn branches(&self) -> Vec<String> {
        self.inner.spec().branches().iter().map(BranchId::label).collect()
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.spec().input_size
    }

    fn num_parameters(&self) -> usize {
        self.inner.params().numel()
    }

    /// Branch outputs for one flat channel-major image.
    fn forward(&self, image: Vec<f32>) -> PyResult<BTreeMap<String, Vec<f64>>> {
        let s = self.inner.spec().input_size;
        if image.len() != 3 * s * s {
            return Err(value_err(format!("expected {} values, got {}", 3 * s * s, image.len())));
        }
        let out = self
            .inner
            .forward_one(&ImageTensor::from_vec(3, s, s, image))
            .map_err(value_err)?;
        Ok(outputs_to_py(&out))
    }

    /// Predicted age per dataset sample.
    #[pyo3(signature = (dataset, policy = "expected_value"))]
    fn predict(&self, dataset: &PyDataset, policy: &str) -> PyResult<Vec<f64>> {
        let policy = parse_policy(policy)?;
        let images: Vec<ImageTensor> = dataset.inner.samples.iter().map(|s| s.image.clone()).collect();
        let outputs = self.inner.forward(&images).map_err(value_err)?;
        outputs
            .iter()
            .map(|o| model::predict_age(o, policy).map_err(value_err))
            .collect()
    }

    /// MAE over `dataset`.
    #[pyo3(signature = (dataset, policy = "expected_value"))]
    fn evaluate(&self, dataset: &PyDataset, policy: &str) -> PyResult<f64> {
        let report =
            granage::eval::evaluate(&self.inner, &dataset.inner, parse_policy(policy)?, false).map_err(value_err)?;
        Ok(report.mae)
    }

    /// Trains in place (the GIL is released meanwhile) and returns the epoch
    /// history as CSV text.
    #[pyo3(signature = (train, val, loss = None, max_epochs = 30, batch_size = 32, initial_lr = 1e-3, seed = 0, augment = true))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        py: Python<'_>,
        train: &PyDataset,
        val: &PyDataset,
        loss: Option<PyLossConfig>,
        max_epochs: usize,
        batch_size: usize,
        initial_lr: f64,
        seed: u64,
        augment: bool,
    ) -> PyResult<String> {
        let mut config = TrainConfig {
            max_epochs,
            batch_size,
            initial_lr,
            seed,
            ..TrainConfig::default()
        };
        config.augment.enabled = augment;
        config.loss_config = match loss {
            Some(l) => l.inner,
            None => losses::LossConfig::new(
                self.inner.spec().branch_widths.iter().copied(),
                self.inner.spec().with_regression,
                1.0,
            )
            .map_err(value_err)?,
        };
        let trainer = Trainer::new(config).map_err(value_err)?;
        let model = self.inner.clone();
        let (train, val) = (&train.inner, &val.inner);
        let (trained, history) = py.detach(|| trainer.fit(model, train, val)).map_err(runtime_err)?;
        self.inner = trained;
        Ok(history.to_csv(false))
    }
}

/// Runs the invariant families (all by default); returns `(name, passed, detail)` triples.
#[pyfunction]
#[pyo3(signature = (families = None))]
fn verify(families: Option<Vec<String>>) -> PyResult<Vec<(String, bool, String)>> {
    let families: Vec<Family> = match families {
        None => Family::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| n.parse())
            .collect::<Result<_, _>>()
            .map_err(value_err)?,
    };
    Ok(run_families(&families, &Implementations::default())
        .into_iter()
        .map(|r| (r.family.to_string(), r.passed, r.detail))
        .collect())
}

#[pymodule]
fn granage_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(representative, m)?)?;
    m.add_function(wrap_pyfunction!(coarsen, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_class::<PyLossConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
