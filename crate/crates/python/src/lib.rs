//! Python bindings. Structured results cross the boundary as plain dicts
//! and lists, built from the same JSON the command line prints.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use auformer::collab::AUFormer as CoreModel;
use auformer::config::{canonical_hash, run_training, split_dataset, MetricsReport, RunConfig as CoreConfig};
use auformer::datagen::{generate_dataset, Dataset as CoreDataset, SyntheticSpec};
use auformer::losses::{gradcheck as core_gradcheck, CheckedLoss};
use auformer::tensor::Tensor;
use auformer::trainer::{count_params, estimate_flops, evaluate_f1, History};
use auformer::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Diverged(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_object<S: Serialize>(py: Python<'_>, value: &S) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Run configuration. Construct from a JSON string; omitted fields default.
#[pyclass(name = "RunConfig", module = "auformer_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => CoreConfig::from_json(text).map_err(to_py)?,
            None => CoreConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreConfig::load(&path).map_err(to_py)?,
        })
    }

    /// Applies `key=value`, e.g. `collab=off`.
    fn apply_override(&mut self, spec: &str) -> PyResult<()> {
        self.inner.apply_override(spec).map_err(to_py)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_object(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(hash={:.12})", self.inner.hash())
    }
}

/// A loaded dataset directory.
#[pyclass(name = "Dataset", module = "auformer_py")]
struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let inner = py.detach(|| CoreDataset::load(&path)).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    #[getter]
    fn num_aus(&self) -> usize {
        self.inner.num_aus()
    }

    fn rates(&self) -> PyResult<Vec<f64>> {
        self.inner.rates().map_err(to_py)
    }

    fn labels(&self) -> Vec<Vec<u8>> {
        self.inner.samples.iter().map(|s| s.labels.clone()).collect()
    }

    fn subjects(&self) -> Vec<u32> {
        self.inner.samples.iter().map(|s| s.subject).collect()
    }

    /// Flat `[C*H*W]` pixels of sample `i`.
    fn image(&self, i: usize) -> PyResult<Vec<f32>> {
        self.inner
            .samples
            .get(i)
            .map(|s| s.image.data().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("sample index {i} out of range")))
    }

    /// `(train, test)` under the config's subject-exclusive split.
    fn split(&self, config: &PyRunConfig) -> PyResult<(PyDataset, PyDataset)> {
        let (tr, te) = split_dataset(&self.inner, &config.inner.data).map_err(to_py)?;
        Ok((PyDataset { inner: tr }, PyDataset { inner: te }))
    }
}

/// AUFormer with f32 weights.
#[pyclass(name = "Model", module = "auformer_py")]
struct PyModel {
    inner: CoreModel<f32>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (config, num_aus = 4, seed = None))]
    fn init(config: &PyRunConfig, num_aus: usize, seed: Option<u64>) -> PyResult<Self> {
        let seed = seed.unwrap_or(config.inner.train.seed);
        let inner = CoreModel::init(config.inner.model_config(num_aus), seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreModel::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn num_aus(&self) -> usize {
        self.inner.config.num_aus
    }

    /// `(channels, height, width)` expected by `forward`.
    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let v = &self.inner.config.vit;
        (v.in_chans, v.image_size, v.image_size)
    }

    fn config_hash(&self) -> String {
        canonical_hash(&self.inner.config)
    }

    /// Forward pass over one flat `[C*H*W]` image. Returns a dict with
    /// `logits`, `probs` and, when present, `aux_logits`/`aux_probs`.
    fn forward(&self, py: Python<'_>, image: Vec<f32>) -> PyResult<Py<PyAny>> {
        let (c, h, w) = self.image_shape();
        let x = Tensor::new(&[c, h, w], image).map_err(to_py)?;
        let pred = py.detach(|| self.inner.forward(&x)).map_err(to_py)?;
        let flat = |t: &Tensor<f32>| t.data().to_vec();
        let out = serde_json::json!({
            "logits": flat(&pred.logits),
            "probs": flat(&pred.probs),
            "aux_logits": pred.aux_logits.as_ref().map(flat),
            "aux_probs": pred.aux_probs.as_ref().map(flat),
        });
        to_object(py, &out)
    }

    fn params(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_object(py, &count_params(&self.inner))
    }

    fn flops(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_object(py, &estimate_flops(&self.inner))
    }

    /// Metrics report over `data` at `threshold`.
    #[pyo3(signature = (data, threshold = 0.5))]
    fn evaluate(&self, py: Python<'_>, data: &PyDataset, threshold: f64) -> PyResult<Py<PyAny>> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(PyValueError::new_err("threshold must lie in [0, 1]"));
        }
        let metrics = py.detach(|| evaluate_f1(&self.inner, &data.inner, threshold)).map_err(to_py)?;
        let report = MetricsReport::new(
            &self.inner,
            canonical_hash(&self.inner.config),
            &metrics,
            threshold,
            &History::default(),
            None,
            (0, data.inner.samples.len()),
        );
        to_object(py, &report)
    }
}

/// Writes a synthetic dataset described by `spec_json` into `out_dir` and
/// returns the manifest path.
#[pyfunction]
fn generate_data(py: Python<'_>, spec_json: &str, out_dir: PathBuf) -> PyResult<PathBuf> {
    let spec: SyntheticSpec =
        serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(format!("invalid spec: {e}")))?;
    spec.validate().map_err(to_py)?;
    py.detach(|| generate_dataset(&spec, &out_dir)).map_err(to_py)
}

/// Trains a fresh model on the config's train split. Returns the model and
/// the metrics report on the held-out split.
#[pyfunction]
fn train(py: Python<'_>, config: &PyRunConfig, data: &PyDataset) -> PyResult<(PyModel, Py<PyAny>)> {
    let outcome = py.detach(|| run_training(&config.inner, &data.inner)).map_err(to_py)?;
    let report = to_object(py, &outcome.report)?;
    Ok((PyModel { inner: outcome.model }, report))
}

/// Analytic vs central-difference loss gradients. `losses` is `all`,
/// `mdwa`, `wdi` or `total`.
#[pyfunction]
#[pyo3(signature = (losses = "all", points = 1000, seed = 0))]
fn gradcheck(py: Python<'_>, losses: &str, points: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let selection = CheckedLoss::parse_list(losses).map_err(to_py)?;
    let entries = py.detach(|| core_gradcheck(&selection, points, seed, false)).map_err(to_py)?;
    let worst = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    to_object(py, &serde_json::json!({"max_rel_err": worst, "entries": entries}))
}

#[pymodule]
fn auformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
