//! Python bindings: configuration, the pipeline commands, checkpoints,
//! models and a few of the pruning primitives.
//!
//! Tensors cross the boundary as flat lists of floats plus a shape.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use xpruner::config::RunConfig;
use xpruner::data::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use xpruner::data::{synth_dataset as synth, Split};
use xpruner::model::{build_model, Model, ModelConfig};
use xpruner::{meter, pipeline, Error, Tensor};

create_exception!(xpruner_py, XprunerError, PyException, "Base class of every xpruner error.");
create_exception!(xpruner_py, ConfigError, XprunerError, "Invalid configuration value.");
create_exception!(xpruner_py, FormatError, XprunerError, "I/O failure or malformed file.");
create_exception!(xpruner_py, NonConvergenceError, XprunerError, "Threshold search missed the budget.");
create_exception!(xpruner_py, DegenerateArchitectureError, XprunerError, "The budget cannot be met.");
create_exception!(xpruner_py, PipelineError, XprunerError, "Pipeline stages run out of order.");

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 => ConfigError::new_err(msg),
        3 => FormatError::new_err(msg),
        4 => NonConvergenceError::new_err(msg),
        5 => DegenerateArchitectureError::new_err(msg),
        6 => PipelineError::new_err(msg),
        _ => XprunerError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for xpruner::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Run configuration. Keys are the snake- or kebab-case field names.
#[pyclass(name = "RunConfig", module = "xpruner_py")]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults, updated by `key=value` keyword arguments.
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                inner.set(&k.extract::<String>()?, &v.str()?.to_string()).py()?;
            }
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        let mut inner = RunConfig::default();
        inner.parse(text).py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        RunConfig::KEYS.to_vec()
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.inner.set(key, &value.str()?.to_string()).py()
    }

    /// The value as written in a config file.
    fn get(&self, key: &str) -> PyResult<String> {
        let want = key.replace('-', "_");
        self.inner
            .to_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .find(|(k, _)| k.replace('-', "_") == want)
            .map(|(_, v)| v.to_string())
            .ok_or_else(|| ConfigError::new_err(format!("unknown configuration key {key:?}")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(alpha={}, seed={}, out_dir={:?})", self.inner.alpha, self.inner.seed, self.inner.out_dir)
    }
}

/// A vision transformer, possibly pruned.
#[pyclass(name = "Model", module = "xpruner_py")]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Fresh model for the architecture in `config`.
    #[new]
    fn new(config: &PyRunConfig) -> PyResult<Self> {
        Ok(Self {
            inner: build_model(&config.inner.model_config()).py()?,
        })
    }

    /// DeiT-Tiny or DeiT-Small shape (`"tiny"`, `"small"`); weights are random.
    #[staticmethod]
    fn deit(size: &str) -> PyResult<Self> {
        let cfg = match size {
            "tiny" => ModelConfig::deit_tiny(),
            "small" => ModelConfig::deit_small(),
            other => return Err(PyValueError::new_err(format!("expected tiny or small, got {other:?}"))),
        };
        Ok(Self {
            inner: build_model(&cfg).py()?,
        })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Heads and MLP widths per block.
    #[getter]
    fn shape(&self) -> Vec<(usize, usize)> {
        self.inner.blocks.iter().map(|b| (b.heads, b.hidden)).collect()
    }

    /// `(block, kind, index, param_count)` for every prunable unit.
    fn prunable_units(&self) -> Vec<(usize, &'static str, usize, usize)> {
        self.inner
            .prunable_units()
            .into_iter()
            .map(|u| (u.block, u.kind.as_str(), u.index, u.param_count))
            .collect()
    }

    /// Logits `(batch, classes)` for flat images of shape
    /// `(batch, channels, size, size)`.
    fn forward(&self, images: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let c = &self.inner.config;
        let per = c.channels * c.image_size * c.image_size;
        if images.is_empty() || !images.len().is_multiple_of(per) {
            return Err(PyValueError::new_err(format!(
                "image data of length {} is not a whole number of {per}-value images",
                images.len()
            )));
        }
        let x = Tensor::new(vec![images.len() / per, c.channels, c.image_size, c.image_size], images).py()?;
        let logits = self.inner.forward(&x).py()?;
        Ok(logits.data().chunks(c.num_classes).map(<[f64]>::to_vec).collect())
    }

    /// Analytic FLOPs for one image of `(channels, height, width)`.
    #[pyo3(signature = (input_shape=None))]
    fn flops(&self, input_shape: Option<(usize, usize, usize)>) -> PyResult<u64> {
        let c = &self.inner.config;
        let (ch, h, w) = input_shape.unwrap_or((c.channels, c.image_size, c.image_size));
        Ok(meter::count_flops(&self.inner, [ch, h, w]).py()?.flops_total)
    }

    fn weight_digest(&self) -> u64 {
        self.inner.weight_digest()
    }

    fn __repr__(&self) -> String {
        format!("Model(params={}, blocks={:?})", self.inner.num_params(), self.shape())
    }
}

/// A loaded pipeline checkpoint.
#[pyclass(name = "Checkpoint", module = "xpruner_py")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner).py()
    }

    /// `baseline`, `masked`, `pruned` or `finetuned`.
    #[getter]
    fn stage(&self) -> &'static str {
        self.inner.stage.as_str()
    }

    #[getter]
    fn model(&self) -> PyModel {
        PyModel {
            inner: self.inner.model.clone(),
        }
    }

    #[getter]
    fn has_masks(&self) -> bool {
        self.inner.masks.is_some()
    }

    /// Fold report as JSON, for pruned and fine-tuned checkpoints.
    #[getter]
    fn fold_report(&self) -> PyResult<Option<String>> {
        self.inner
            .fold_report
            .as_ref()
            .map(|f| serde_json::to_string(f).map_err(|e| XprunerError::new_err(e.to_string())))
            .transpose()
    }

    /// `(epoch, loss, train_accuracy, test_accuracy)` of the stage's training.
    #[getter]
    fn history(&self) -> Vec<(usize, f64, f64, Option<f64>)> {
        self.inner
            .metadata
            .history
            .iter()
            .map(|e| (e.epoch, e.loss, e.train_accuracy, e.test_accuracy))
            .collect()
    }
}

#[pyfunction]
fn train_baseline(py: Python<'_>, config: &PyRunConfig) -> PyResult<PathBuf> {
    let cfg = config.inner.clone();
    py.allow_threads(|| pipeline::cmd_train_baseline(&cfg)).py()
}

#[pyfunction]
fn train_masks(py: Python<'_>, config: &PyRunConfig, baseline: PathBuf) -> PyResult<PathBuf> {
    let cfg = config.inner.clone();
    py.allow_threads(|| pipeline::cmd_train_masks(&cfg, &baseline)).py()
}

/// Returns the pruned checkpoint path and the fold report as JSON.
#[pyfunction]
fn prune(py: Python<'_>, config: &PyRunConfig, masked: PathBuf) -> PyResult<(PathBuf, String)> {
    let cfg = config.inner.clone();
    let (path, report) = py.allow_threads(|| pipeline::cmd_prune(&cfg, &masked)).py()?;
    let json = serde_json::to_string(&report).map_err(|e| XprunerError::new_err(e.to_string()))?;
    Ok((path, json))
}

#[pyfunction]
fn finetune(py: Python<'_>, config: &PyRunConfig, pruned: PathBuf) -> PyResult<PathBuf> {
    let cfg = config.inner.clone();
    py.allow_threads(|| pipeline::cmd_finetune(&cfg, &pruned)).py()
}

/// Report over `checkpoints` as JSON; also written to the output directory.
#[pyfunction]
fn report(py: Python<'_>, config: &PyRunConfig, checkpoints: Vec<PathBuf>) -> PyResult<String> {
    let cfg = config.inner.clone();
    let r = py.allow_threads(|| pipeline::cmd_report(&cfg, &checkpoints)).py()?;
    serde_json::to_string(&r).map_err(|e| XprunerError::new_err(e.to_string()))
}

/// Synthetic grating images: `(flat images, labels)`, images of shape
/// `(n, 1, size, size)`.
#[pyfunction]
#[pyo3(signature = (seed, num_classes, per_class, size, noise, train=true))]
fn synth_dataset(
    seed: u64,
    num_classes: usize,
    per_class: usize,
    size: usize,
    noise: f64,
    train: bool,
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let split = if train { Split::Train } else { Split::Test };
    let d = synth(seed, num_classes, per_class, size, noise, split).py()?;
    Ok((d.images.into_data(), d.labels))
}

/// Parameter-weighted mean of per-layer rates.
#[pyfunction]
fn weighted_rate(rates: Vec<f64>, params: Vec<usize>) -> PyResult<f64> {
    xpruner::prune::weighted_rate(&rates, &params).py()
}

/// Units kept in a layer of `units` at rate `rate`.
#[pyfunction]
fn kept_count(rate: f64, units: usize) -> usize {
    xpruner::prune::kept_count(rate, units)
}

#[pymodule]
fn xpruner_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(train_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(train_masks, m)?)?;
    m.add_function(wrap_pyfunction!(prune, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_rate, m)?)?;
    m.add_function(wrap_pyfunction!(kept_count, m)?)?;
    let py = m.py();
    m.add("XprunerError", py.get_type::<XprunerError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("FormatError", py.get_type::<FormatError>())?;
    m.add("NonConvergenceError", py.get_type::<NonConvergenceError>())?;
    m.add("DegenerateArchitectureError", py.get_type::<DegenerateArchitectureError>())?;
    m.add("PipelineError", py.get_type::<PipelineError>())?;
    Ok(())
}
