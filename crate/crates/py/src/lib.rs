//! Python bindings for `segcn-core`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use segcn_core::config::build_config;
use segcn_core::data::{load_bundle, write_bundle, GraphBundle};
use segcn_core::graph::{self, PerturbConfig, UndirectedGraph};
use segcn_core::model::{predict, Checkpoint, GcnParams, Role};
use segcn_core::node5::build_node5;
use segcn_core::numerics::stream_rng;
use segcn_core::suite::{run_suite as core_run_suite, SuiteName};
use segcn_core::train::{
    embeddings, evaluate, metrics_line, train_with, EpochRecord, Layer, Mode, PreparedGraph,
    RunArtifacts, Subset, TrainConfig,
};

fn py_err(e: segcn_core::Error) -> PyErr {
    match e {
        segcn_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows(m: &segcn_core::numerics::DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_mode(preset: &str) -> PyResult<Mode> {
    match preset {
        "segcn" => Ok(Mode::Segcn),
        "baseline" => Ok(Mode::Baseline),
        other => Err(PyValueError::new_err(format!(
            "preset must be \"segcn\" or \"baseline\", got {other:?}"
        ))),
    }
}

/// A dataset: graph, features, labels and the fixed split.
#[pyclass(name = "Bundle", module = "segcn", frozen)]
struct PyBundle {
    inner: GraphBundle,
}

#[pymethods]
impl PyBundle {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_bundle(path)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        GraphBundle::from_bytes(data)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.inner.to_bytes().map_err(py_err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_bundle(&self.inner, path).map_err(py_err)
    }

    /// The 35-node toy graph cut out of this (Cora) bundle.
    fn node5(&self) -> PyResult<Self> {
        build_node5(&self.inner)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.graph.num_edges()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn num_features(&self) -> usize {
        self.inner.features.cols()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    #[getter]
    fn graph(&self) -> PyGraph {
        PyGraph {
            inner: self.inner.graph.clone(),
        }
    }

    /// `{"train": [...], "val": [...], "test": [...]}`
    fn fixed_split<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let split = &self.inner.fixed_split;
        let d = PyDict::new(py);
        d.set_item("train", split.train.clone())?;
        d.set_item("val", split.val.clone())?;
        d.set_item("test", split.test.clone())?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let m = self.inner.metadata();
        format!(
            "Bundle({:?}, nodes={}, edges={}, classes={}, features={})",
            m.name, m.num_nodes, m.num_edges, m.num_classes, m.num_features
        )
    }
}

#[pyclass(name = "Graph", module = "segcn", frozen)]
struct PyGraph {
    inner: UndirectedGraph,
}

#[pymethods]
impl PyGraph {
    #[new]
    fn new(num_nodes: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        UndirectedGraph::from_edges(num_nodes, edges)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    /// Unordered pairs `(u, v)` with `u < v`.
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().collect()
    }

    fn degree(&self, node: usize) -> PyResult<usize> {
        if node >= self.inner.num_nodes() {
            return Err(PyValueError::new_err(format!("node {node} out of range")));
        }
        Ok(self.inner.degree(node))
    }

    /// Stored entries `(row, col, value)` of the normalized adjacency.
    fn normalized(&self) -> Vec<(usize, usize, f64)> {
        graph::normalize_adjacency(&self.inner)
            .matrix()
            .iter()
            .collect()
    }

    /// Edge-dropped copy; nodes left without edges get one back.
    #[pyo3(signature = (drop_prob, seed))]
    fn perturbed(&self, drop_prob: f64, seed: u64) -> PyResult<Self> {
        let cfg = PerturbConfig {
            edge_drop_prob: drop_prob,
            ..Default::default()
        };
        graph::perturb_graph(&self.inner, &cfg, &mut stream_rng(seed, 4))
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(nodes={}, edges={})",
            self.inner.num_nodes(),
            self.inner.num_edges()
        )
    }
}

/// Stored entries `(row, col, value)` of `D^-1/2 (A + I) D^-1/2`.
#[pyfunction]
fn normalize_adjacency(
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
) -> PyResult<Vec<(usize, usize, f64)>> {
    Ok(PyGraph::new(num_nodes, edges)?.normalized())
}

/// Training settings: a preset with optional TOML text and `key=value`
/// overrides layered on top.
#[pyclass(name = "Config", module = "segcn", frozen)]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (preset = "segcn", toml = None, overrides = Vec::new()))]
    fn new(preset: &str, toml: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        build_config(parse_mode(preset)?, toml, &overrides)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    /// A copy with further `key=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        let text = toml_text(&self.inner)?;
        build_config(self.inner.mode, Some(&text), &overrides)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self {
            inner: self.inner.clone().with_seed(seed),
        }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    fn to_toml(&self) -> PyResult<String> {
        toml_text(&self.inner)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let text =
            serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))?;
        json_to_py(py, &text)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(mode={:?}, seed={}, epochs={})",
            self.inner.mode.as_str(),
            self.inner.seed,
            self.inner.schedules.total_epochs
        )
    }
}

fn toml_text(config: &TrainConfig) -> PyResult<String> {
    toml::to_string(config).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// GCN weights, as saved in a checkpoint.
#[pyclass(name = "Params", module = "segcn", frozen)]
struct PyParams {
    inner: GcnParams,
    epoch: usize,
    role: Role,
}

impl PyParams {
    fn from_checkpoint(c: &Checkpoint) -> Self {
        Self {
            inner: c.params.clone(),
            epoch: c.epoch,
            role: c.role,
        }
    }

    fn prepared(bundle: &PyBundle, row_normalize: bool) -> PyResult<PreparedGraph> {
        PreparedGraph::new(&bundle.inner, row_normalize).map_err(py_err)
    }
}

#[pymethods]
impl PyParams {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(path)
            .map(|c| Self::from_checkpoint(&c))
            .map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(self.role, self.epoch, self.inner.clone())
            .save(path)
            .map_err(py_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.epoch
    }

    #[getter]
    fn theta0(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.theta0)
    }

    #[getter]
    fn theta1(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.theta1)
    }

    /// `(features, hidden, classes)`
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (
            self.inner.num_features(),
            self.inner.hidden(),
            self.inner.num_classes(),
        )
    }

    /// Dropout-free class probabilities for every node.
    #[pyo3(signature = (bundle, row_normalize = true))]
    fn predict(&self, bundle: &PyBundle, row_normalize: bool) -> PyResult<Vec<Vec<f64>>> {
        let prepared = Self::prepared(bundle, row_normalize)?;
        predict(&self.inner, &prepared.a_hat, &prepared.features)
            .map(|p| rows(&p))
            .map_err(py_err)
    }

    /// Activations of layer 1 (hidden) or 2 (logits).
    #[pyo3(signature = (bundle, layer = 2, row_normalize = true))]
    fn embeddings(
        &self,
        bundle: &PyBundle,
        layer: u8,
        row_normalize: bool,
    ) -> PyResult<Vec<Vec<f64>>> {
        let layer = Layer::try_from(layer).map_err(py_err)?;
        let prepared = Self::prepared(bundle, row_normalize)?;
        embeddings(&self.inner, &prepared, layer)
            .map(|e| rows(&e))
            .map_err(py_err)
    }

    /// Accuracy on one subset of the split that `config` resolves to.
    #[pyo3(signature = (bundle, subset = "test", config = None))]
    fn evaluate(
        &self,
        bundle: &PyBundle,
        subset: &str,
        config: Option<&PyConfig>,
    ) -> PyResult<f64> {
        let config = config.map_or_else(TrainConfig::segcn, |c| c.inner.clone());
        let split = config.resolve_split(&bundle.inner).map_err(py_err)?;
        let prepared = Self::prepared(bundle, config.row_normalize)?;
        let which: Subset = subset.parse().map_err(py_err)?;
        evaluate(&self.inner, &prepared, &split, which).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let (f, h, c) = self.shape();
        format!(
            "Params(features={f}, hidden={h}, classes={c}, epoch={})",
            self.epoch
        )
    }
}

/// Results of one training run.
#[pyclass(name = "Run", module = "segcn", frozen)]
struct PyRun {
    inner: RunArtifacts,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn best_epoch(&self) -> usize {
        self.inner.best_epoch
    }

    /// Test accuracy of the teacher at the validation peak.
    #[getter]
    fn test_accuracy(&self) -> f64 {
        self.inner.test_accuracy
    }

    #[getter]
    fn student_test_accuracy(&self) -> f64 {
        self.inner.student_test_accuracy
    }

    #[getter]
    fn teacher(&self) -> PyParams {
        PyParams::from_checkpoint(&self.inner.best_teacher)
    }

    #[getter]
    fn student(&self) -> PyParams {
        PyParams::from_checkpoint(&self.inner.best_student)
    }

    /// One dict per epoch.
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyAny>>> {
        self.inner
            .records
            .iter()
            .map(|r| json_to_py(py, &metrics_line(r)))
            .collect()
    }

    fn split<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        d.set_item("train", self.inner.split.train.clone())?;
        d.set_item("val", self.inner.split.val.clone())?;
        d.set_item("test", self.inner.split.test.clone())?;
        Ok(d)
    }

    /// Writes metrics, checkpoints and a summary into `dir`.
    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(dir).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Run(epochs={}, best_epoch={}, test_accuracy={:.4})",
            self.inner.records.len(),
            self.inner.best_epoch,
            self.inner.test_accuracy
        )
    }
}

/// Trains on `bundle`. `on_epoch`, if given, is called with each epoch's
/// metrics dict as it is produced.
#[pyfunction]
#[pyo3(signature = (config, bundle, on_epoch = None))]
fn train(
    py: Python<'_>,
    config: &PyConfig,
    bundle: &PyBundle,
    on_epoch: Option<Bound<'_, PyAny>>,
) -> PyResult<PyRun> {
    let result = match on_epoch {
        None => py.detach(|| train_with(&config.inner, &bundle.inner, |_| {})),
        Some(callback) => {
            let mut failure: Option<PyErr> = None;
            let mut call = |record: &EpochRecord| {
                if failure.is_none() {
                    let outcome = json_to_py(py, &metrics_line(record))
                        .and_then(|d| callback.call1((d,)).map(drop));
                    failure = outcome.err();
                }
            };
            let result = train_with(&config.inner, &bundle.inner, &mut call);
            if let Some(err) = failure {
                return Err(err);
            }
            result
        }
    };
    result.map(|inner| PyRun { inner }).map_err(py_err)
}

/// Runs a named suite over bundles in `data_dir`; returns one dict per cell.
#[pyfunction]
#[pyo3(signature = (name, data_dir, runs = None, first_seed = 0, overrides = Vec::new()))]
fn run_suite<'py>(
    py: Python<'py>,
    name: &str,
    data_dir: PathBuf,
    runs: Option<usize>,
    first_seed: u64,
    overrides: Vec<String>,
) -> PyResult<Vec<Bound<'py, PyAny>>> {
    let suite: SuiteName = name.parse().map_err(py_err)?;
    let segcn = build_config(Mode::Segcn, None, &overrides).map_err(py_err)?;
    let baseline = build_config(Mode::Baseline, None, &overrides).map_err(py_err)?;
    let runs = runs.unwrap_or(suite.default_runs()) as u64;
    let seeds: Vec<u64> = (first_seed..first_seed + runs).collect();
    let summary = py
        .detach(|| core_run_suite(suite, &data_dir, &seeds, &segcn, &baseline, |_| {}))
        .map_err(py_err)?;
    summary
        .iter()
        .map(|row| {
            let text =
                serde_json::to_string(row).map_err(|e| PyValueError::new_err(e.to_string()))?;
            json_to_py(py, &text)
        })
        .collect()
}

#[pymodule]
pub fn segcn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBundle>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_adjacency, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
