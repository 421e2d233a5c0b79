//! Python bindings: datasets, backends, single runs, grid evaluation and the
//! fitted modulators. Configurations cross the boundary as dicts or JSON
//! strings with the same fields as the CLI's config files.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fads_icl::extraction::{TokenId, TokenProb};
use fads_icl::harness::{compare_table, evaluate};
use fads_icl::modulators::{self, FittedModulator, ModulatorKind};
use fads_icl::pipeline::{run, ExperimentConfig};
use fads_icl::{
    synthetic_task, BackendDescriptor, CacheDir, Error, ErrorClass, SyntheticSpec, TaskDataset, VocabDistribution,
};

create_exception!(fads_icl, FadsError, PyException);
create_exception!(fads_icl, ConfigError, FadsError);
create_exception!(fads_icl, BackendError, FadsError);
create_exception!(fads_icl, DataError, FadsError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Config => ConfigError::new_err(msg),
        ErrorClass::Backend => BackendError::new_err(msg),
        ErrorClass::Data => DataError::new_err(msg),
    }
}

/// Accepts a dict (serialized with Python's json module) or a JSON string.
fn json_arg(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.extract::<String>() {
        return Ok(s);
    }
    let json = obj.py().import("json")?;
    json.call_method1("dumps", (obj,))?.extract()
}

fn parse<T: serde::de::DeserializeOwned>(obj: Option<&Bound<'_, PyAny>>, what: &str) -> PyResult<T> {
    let text = match obj {
        Some(o) => json_arg(o)?,
        None => "{}".to_string(),
    };
    serde_json::from_str(&text).map_err(|e| ConfigError::new_err(format!("{what}: {e}")))
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset(TaskDataset);

#[pymethods]
impl PyDataset {
    /// Loads a dataset manifest.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        TaskDataset::load(path).map(PyDataset).map_err(to_py)
    }

    /// Generated task with opaque texts, meant for the mock backend.
    #[staticmethod]
    #[pyo3(signature = (classes=4, train_per_class=200, test_per_class=100, seed=0))]
    fn synthetic(classes: usize, train_per_class: usize, test_per_class: usize, seed: u64) -> PyResult<Self> {
        let spec = SyntheticSpec {
            classes,
            train_per_class,
            test_per_class,
            seed,
        };
        synthetic_task("synthetic", &spec).map(PyDataset).map_err(to_py)
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.0.classes.clone()
    }

    #[getter]
    fn train(&self) -> Vec<(String, usize)> {
        self.0.train.iter().map(|e| (e.text.clone(), e.label)).collect()
    }

    #[getter]
    fn test(&self) -> Vec<(String, usize)> {
        self.0.test.iter().map(|e| (e.text.clone(), e.label)).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({:?}, classes={}, train={}, test={})",
            self.0.name,
            self.0.classes.len(),
            self.0.train.len(),
            self.0.test.len()
        )
    }
}

#[pyclass(name = "Backend", frozen)]
struct PyBackend {
    inner: Box<dyn fads_icl::Backend>,
}

#[pymethods]
impl PyBackend {
    /// Builds a backend from a descriptor, e.g. `{"kind": "mock", "dim": 64}`.
    /// The mock reads labels from `dataset`.
    #[new]
    fn new(descriptor: &Bound<'_, PyAny>, dataset: &PyDataset) -> PyResult<Self> {
        let d: BackendDescriptor = parse(Some(descriptor), "backend descriptor")?;
        let inner = d.build(&dataset.0).map_err(to_py)?;
        Ok(PyBackend { inner })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id()
    }

    fn __repr__(&self) -> String {
        format!("Backend({})", self.inner.id())
    }
}

/// Result of one `(config, seed)` run.
#[pyclass(name = "RunOutput", frozen)]
struct PyRunOutput {
    #[pyo3(get)]
    accuracy: f64,
    #[pyo3(get)]
    gold: Vec<usize>,
    #[pyo3(get)]
    predicted: Vec<usize>,
    #[pyo3(get)]
    probs: Vec<Vec<f64>>,
    metadata: String,
    modulator: Option<FittedModulator>,
}

#[pymethods]
impl PyRunOutput {
    /// Run metadata as a dict.
    #[getter]
    fn metadata<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        py.import("json")?.call_method1("loads", (self.metadata.as_str(),))
    }

    /// The fitted modulator, for the feature-adaptive method.
    #[getter]
    fn modulator(&self) -> Option<PyModulator> {
        self.modulator.clone().map(PyModulator)
    }

    fn __repr__(&self) -> String {
        format!("RunOutput(accuracy={:.4}, n={})", self.accuracy, self.gold.len())
    }
}

/// Runs one configuration on one seed. `config` overrides the defaults and
/// `seed`, when given, overrides the config's seed.
#[pyfunction(name = "run")]
#[pyo3(signature = (dataset, backend, config=None, seed=None, cache=None))]
fn py_run(
    py: Python<'_>,
    dataset: &PyDataset,
    backend: &PyBackend,
    config: Option<&Bound<'_, PyAny>>,
    seed: Option<u64>,
    cache: Option<String>,
) -> PyResult<PyRunOutput> {
    let mut cfg: ExperimentConfig = parse(config, "experiment config")?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (ds, be) = (&dataset.0, backend.inner.as_ref());
    let out = py
        .detach(|| run(ds, &cfg, be, cache.map(CacheDir::new).as_ref()))
        .map_err(to_py)?;
    Ok(PyRunOutput {
        accuracy: out.accuracy(),
        gold: out.predictions.iter().map(|p| p.gold).collect(),
        predicted: out.predictions.iter().map(|p| p.predicted).collect(),
        probs: out.predictions.iter().map(|p| p.probs.clone()).collect(),
        metadata: serde_json::to_string(&out.metadata).map_err(|e| FadsError::new_err(e.to_string()))?,
        modulator: out.modulator,
    })
}

/// Evaluates a grid over seeds. Returns `(results, table, csv)` where
/// `results` is a list of dicts with per-seed accuracies, mean and std.
#[pyfunction(name = "evaluate")]
#[pyo3(signature = (dataset, backend, grid, seeds=vec![0, 1, 2, 3, 4], workers=1, cache=None))]
fn py_evaluate<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    backend: &PyBackend,
    grid: &Bound<'py, PyAny>,
    seeds: Vec<u64>,
    workers: usize,
    cache: Option<String>,
) -> PyResult<(Bound<'py, PyAny>, String, String)> {
    let grid: Vec<ExperimentConfig> = parse(Some(grid), "configuration grid")?;
    let (ds, be) = (&dataset.0, backend.inner.as_ref());
    let results = py
        .detach(|| evaluate(ds, &grid, &seeds, be, cache.map(CacheDir::new).as_ref(), workers))
        .map_err(to_py)?;
    let table = compare_table(&results);
    let json = serde_json::to_string(&results).map_err(|e| FadsError::new_err(e.to_string()))?;
    let obj = py.import("json")?.call_method1("loads", (json,))?;
    Ok((obj, table.pretty(), table.csv()))
}

#[pyclass(name = "Modulator", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModulator(FittedModulator);

#[pymethods]
impl PyModulator {
    /// Fits `kind` (`lr`, `svm`, `mlp`, `knn`, `tree`, or a dict with a
    /// `type` field and parameters) on rows `x` with labels `y`.
    #[staticmethod]
    #[pyo3(signature = (kind, x, y, classes=None, seed=0))]
    fn fit(
        py: Python<'_>,
        kind: &Bound<'_, PyAny>,
        x: Vec<Vec<f64>>,
        y: Vec<usize>,
        classes: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let kind: ModulatorKind = match kind.extract::<String>() {
            Ok(s) if !s.trim_start().starts_with('{') => s.parse().map_err(to_py)?,
            _ => parse(Some(kind), "modulator")?,
        };
        kind.validate().map_err(to_py)?;
        let classes = classes.unwrap_or_else(|| y.iter().max().map_or(0, |m| m + 1));
        py.detach(|| modulators::fit(&kind, &x, &y, classes, seed))
            .map(PyModulator)
            .map_err(to_py)
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        x.iter().map(|r| self.0.predict_proba(r).map_err(to_py)).collect()
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        x.iter().map(|r| self.0.predict(r).map_err(to_py)).collect()
    }

    #[getter]
    fn kind(&self) -> String {
        self.0.kind().to_string()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(to_py)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        FittedModulator::from_json(s).map(PyModulator).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Modulator({}, dim={}, classes={})", self.0.kind(), self.0.input_dim(), self.0.num_classes())
    }
}

fn distribution(d: &Bound<'_, PyDict>) -> PyResult<VocabDistribution> {
    let mut raw = Vec::with_capacity(d.len());
    for (k, v) in d.iter() {
        let id: u64 = k.extract()?;
        raw.push(TokenProb {
            id: TokenId(id),
            token: id.to_string(),
            prob: v.extract()?,
        });
    }
    VocabDistribution::from_raw(raw).map_err(to_py)
}

/// Smoothed `D(p‖q)` between two `{token_id: probability}` dicts.
#[pyfunction]
fn kl_divergence(p: &Bound<'_, PyDict>, q: &Bound<'_, PyDict>) -> PyResult<f64> {
    Ok(fads_icl::kl_divergence(&distribution(p)?, &distribution(q)?))
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> Vec<f64> {
    modulators::softmax(&logits)
}

#[pymodule]
#[pyo3(name = "fads_icl")]
fn fads_icl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("FadsError", py.get_type::<FadsError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("BackendError", py.get_type::<BackendError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyBackend>()?;
    m.add_class::<PyRunOutput>()?;
    m.add_class::<PyModulator>()?;
    m.add_function(wrap_pyfunction!(py_run, m)?)?;
    m.add_function(wrap_pyfunction!(py_evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    Ok(())
}
