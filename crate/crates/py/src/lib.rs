//! Python bindings. Images cross the boundary as flat lists of levels in
//! `[N, C, H, W]` order together with their shape.

use std::collections::BTreeMap;
use std::path::PathBuf;

use gpcnn::checkpoint::TrainerState;
use gpcnn::data::{load_mnist, make_synthetic, one_hot, Split};
use gpcnn::diagnostics::{blind_spot_oracle, causality_check, gradient_audit, AuditOptions};
use gpcnn::model::parse_architecture;
use gpcnn::sampler::{sample, SampleOptions};
use gpcnn::train::{evaluate, fit, OptimizerState, TrainConfig};
use gpcnn::{
    load_checkpoint, save_checkpoint, Autoregressive, Checkpoint, CondMode, CondSource, Conditioning, Error,
    GatedPixelCNN, QuantizationSpec, SyntheticKind, Tensor,
};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for gpcnn::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn str_map(pairs: &BTreeMap<String, Bound<'_, PyAny>>) -> PyResult<BTreeMap<String, String>> {
    pairs
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.str()?.to_string_lossy().into_owned())))
        .collect()
}

#[pyclass(name = "ModelConfig", module = "gpcnn", from_py_object)]
#[derive(Clone)]
struct PyModelConfig(gpcnn::ModelConfig);

#[pymethods]
impl PyModelConfig {
    /// Named preset: `mnist-small` or `imagenet-paper`.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        gpcnn::ModelConfig::preset(name).py().map(Self)
    }

    #[staticmethod]
    fn tiny(height: usize, width: usize, channels: usize, levels: usize) -> Self {
        Self(gpcnn::ModelConfig::tiny(height, width, channels, levels))
    }

    /// Copy with the given keys overridden, e.g. `cfg.with_(layers=4)`.
    #[pyo3(signature = (**overrides))]
    fn with_(&self, overrides: Option<BTreeMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let mut cfg = self.0.clone();
        if let Some(o) = overrides {
            cfg.apply(&str_map(&o)?, true).py()?;
        }
        Ok(Self(cfg))
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels
    }

    #[getter]
    fn levels(&self) -> usize {
        self.0.levels
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", self.0.to_kv().trim_end().replace('\n', ", "))
    }
}

#[pyclass(name = "Dataset", module = "gpcnn")]
struct PyDataset(gpcnn::Dataset);

#[pymethods]
impl PyDataset {
    /// `kind` is `stripes` or `brightness`; image `i` has class `i % 2`.
    #[staticmethod]
    #[pyo3(signature = (kind, count, height, width, levels=4, seed=0))]
    fn synthetic(kind: &str, count: usize, height: usize, width: usize, levels: usize, seed: u64) -> PyResult<Self> {
        let kind = match kind {
            "stripes" => SyntheticKind::StripesHv,
            "brightness" => SyntheticKind::Brightness2Class,
            _ => return Err(PyValueError::new_err(format!("unknown synthetic corpus {kind:?}"))),
        };
        make_synthetic(kind, count, (height, width), levels, seed).py().map(Self)
    }

    /// IDX files (`train-images-idx3-ubyte` and friends) in `directory`.
    #[staticmethod]
    #[pyo3(signature = (directory, split="train", levels=4))]
    fn idx(directory: PathBuf, split: &str, levels: usize) -> PyResult<Self> {
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(PyValueError::new_err(format!("unknown split {split:?}"))),
        };
        let q = QuantizationSpec::new(levels).py()?;
        load_mnist(&directory, split, q).py().map(Self)
    }

    #[staticmethod]
    #[pyo3(signature = (images, shape, levels, labels=None, classes=0))]
    fn from_levels(
        images: Vec<f64>,
        shape: Vec<usize>,
        levels: usize,
        labels: Option<Vec<usize>>,
        classes: usize,
    ) -> PyResult<Self> {
        let t = Tensor::new(&shape, images).py()?;
        gpcnn::Dataset::new(t, labels, levels, classes).py().map(Self)
    }

    /// First `at` images and the rest.
    fn split(&self, at: usize) -> (Self, Self) {
        let (a, b) = self.0.split(at);
        (Self(a), Self(b))
    }

    fn images(&self) -> (Vec<f64>, Vec<usize>) {
        (self.0.images.data().to_vec(), self.0.images.shape().to_vec())
    }

    fn labels(&self) -> Option<Vec<usize>> {
        self.0.labels.clone()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Model", module = "gpcnn")]
struct PyModel {
    model: GatedPixelCNN,
    state: Option<(OptimizerState, TrainerState)>,
}

impl PyModel {
    fn source(&self) -> CondSource {
        match self.model.config().conditioning {
            CondMode::None => CondSource::None,
            _ => CondSource::Class,
        }
    }

    fn conditioning(&self, labels: Option<Vec<usize>>) -> PyResult<Conditioning> {
        match (self.model.config().conditioning, labels) {
            (CondMode::None, None) => Ok(Conditioning::None),
            (CondMode::Global { dim }, Some(l)) => Ok(Conditioning::Global(one_hot(&l, dim).py()?)),
            (CondMode::None, Some(_)) => Err(PyValueError::new_err("model is unconditional")),
            _ => Err(PyValueError::new_err("model needs class labels")),
        }
    }
}

#[pymethods]
impl PyModel {
    /// `init="zeros"` gives the uniform model.
    #[new]
    #[pyo3(signature = (config, seed=0, init="random"))]
    fn new(config: PyModelConfig, seed: u64, init: &str) -> PyResult<Self> {
        let mut model = GatedPixelCNN::new(config.0, seed).py()?;
        match init {
            "random" => {}
            "zeros" => model.params_mut().zero(),
            _ => return Err(PyValueError::new_err(format!("unknown init {init:?}"))),
        }
        Ok(Self { model, state: None })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).py()?;
        let mut model = GatedPixelCNN::new(ck.config.clone(), 0).py()?;
        ck.restore_into(&mut model).py()?;
        Ok(Self {
            model,
            state: Some((ck.optimizer, ck.trainer)),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let (opt, trainer) = match &self.state {
            Some((o, t)) => (o.clone(), t.clone()),
            None => (
                OptimizerState::new(TrainConfig::default().optimizer, self.model.params()),
                TrainerState::new(0),
            ),
        };
        save_checkpoint(&Checkpoint::capture(&self.model, &opt, &trainer), &path).py()
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig(self.model.config().clone())
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.model.params().count()
    }

    /// Mean negative log-likelihood in bits per dimension.
    #[pyo3(signature = (images, shape, labels=None))]
    fn nll(&self, images: Vec<f64>, shape: Vec<usize>, labels: Option<Vec<usize>>) -> PyResult<f64> {
        let t = Tensor::new(&shape, images).py()?;
        let cond = self.conditioning(labels)?;
        self.model.nll(&t, &cond).py()
    }

    /// Held-out bits per dimension over a dataset.
    #[pyo3(signature = (data, limit=None))]
    fn evaluate(&self, data: &PyDataset, limit: Option<usize>) -> PyResult<f64> {
        evaluate(&self.model, &data.0, self.source(), 64, limit).py()
    }

    /// Trains up to step `steps` (continuing from earlier calls) and returns
    /// the evaluation history as `(step, train_bits, eval_bits)` tuples.
    #[pyo3(signature = (train, eval, steps, seed=0, batch_size=16, learning_rate=None, eval_every=None))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        py: Python<'_>,
        train: &PyDataset,
        eval: &PyDataset,
        steps: u64,
        seed: u64,
        batch_size: usize,
        learning_rate: Option<f64>,
        eval_every: Option<u64>,
    ) -> PyResult<Vec<(u64, f64, f64)>> {
        let defaults = TrainConfig::default();
        let cfg = TrainConfig {
            steps,
            seed,
            batch_size,
            learning_rate: learning_rate.unwrap_or(defaults.learning_rate),
            eval_every: eval_every.unwrap_or(steps.max(1)),
            ..defaults
        };
        let source = self.source();
        let state = self.state.take();
        let model = &mut self.model;
        let (history, opt, trainer) = py.detach(|| fit(model, &train.0, &eval.0, source, &cfg, state)).py()?;
        self.state = Some((opt, trainer));
        Ok(history.entries.iter().map(|e| (e.step, e.train_bits, e.eval_bits)).collect())
    }

    /// Draws `count` images; returns flat levels and their shape.
    #[pyo3(signature = (count, seed=0, temperature=1.0, labels=None))]
    fn sample(
        &self,
        py: Python<'_>,
        count: usize,
        seed: u64,
        temperature: f64,
        labels: Option<Vec<usize>>,
    ) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let cond = self.conditioning(labels)?;
        let opts = SampleOptions {
            temperature,
            ..SampleOptions::default()
        };
        let model = &self.model;
        let s = py.detach(|| sample(model, count, &cond, seed, opts)).py()?;
        Ok((s.images.data().to_vec(), s.images.shape().to_vec()))
    }

    /// Largest relative error between analytic and finite-difference gradients.
    #[pyo3(signature = (seed=0))]
    fn gradient_audit(&self, seed: u64) -> PyResult<f64> {
        let opts = AuditOptions {
            seed,
            ..AuditOptions::default()
        };
        Ok(gradient_audit(&self.model, opts).py()?.max_relative_error)
    }
}

/// Number of forbidden input-to-output dependencies found over `trials`
/// random weight draws.
#[pyfunction]
#[pyo3(name = "causality_check", signature = (config, trials=5, tolerance=0.0, seed=0))]
fn py_causality_check(config: PyModelConfig, trials: usize, tolerance: f64, seed: u64) -> PyResult<usize> {
    Ok(causality_check(&config.0, trials, tolerance, seed).py()?.len())
}

/// Row-major mask of input pixels that can reach the target's logits.
#[pyfunction]
#[pyo3(name = "blind_spot", signature = (architecture, depth, filter, height, width, target))]
fn py_blind_spot(
    architecture: &str,
    depth: usize,
    filter: usize,
    height: usize,
    width: usize,
    target: (usize, usize),
) -> PyResult<Vec<bool>> {
    let arch = parse_architecture(architecture).py()?;
    Ok(blind_spot_oracle(arch, depth, filter, (height, width), target))
}

#[pymodule(name = "gpcnn")]
fn gpcnn_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(py_causality_check, m)?)?;
    m.add_function(wrap_pyfunction!(py_blind_spot, m)?)?;
    Ok(())
}
