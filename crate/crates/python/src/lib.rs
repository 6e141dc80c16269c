//! Python bindings for the `autotcl` core crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use autotcl::augment::{self, HardConcreteParams};
use autotcl::data::{self, TimeSeriesDataset};
use autotcl::eval;
use autotcl::trainer::{self, Checkpoint};
use autotcl::{Error, ExperimentConfig};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::Numerical { .. } => PyArithmeticError::new_err(msg),
        Error::Invariant(_) | Error::Tensor(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &value)
}

/// Experiment configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml_str(toml).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &self.inner)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    fn __repr__(&self) -> String {
        format!("Config(dataset={:?}, variant={}, seed={})", self.inner.data.dataset, self.inner.variant.name(), self.inner.seed)
    }
}

/// A loaded, standardized dataset.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: TimeSeriesDataset,
}

#[pymethods]
impl PyDataset {
    /// Resolves `name` against `data_dir`, then `$AUTOTCL_DATA_DIR`.
    #[staticmethod]
    #[pyo3(signature = (name, data_dir = None, univariate = false))]
    fn load(name: &str, data_dir: Option<PathBuf>, univariate: bool) -> PyResult<Self> {
        data::prepare_dataset(name, None, univariate, data_dir.as_deref())
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn n_timestamps(&self) -> usize {
        self.inner.n_total()
    }

    #[getter]
    fn columns(&self) -> Vec<String> {
        self.inner.columns.clone()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// Standardized values as a list of rows.
    fn values(&self) -> Vec<Vec<f64>> {
        self.inner.values.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        format!("Dataset({:?}, T={}, F={})", self.inner.name, self.inner.n_total(), self.inner.n_features())
    }
}

/// Alternating trainer for the encoder and augmentation network.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: trainer::Trainer,
    dataset: TimeSeriesDataset,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config, dataset, checkpoint_dir = None))]
    fn new(config: &PyConfig, dataset: &PyDataset, checkpoint_dir: Option<PathBuf>) -> PyResult<Self> {
        let mut inner = trainer::Trainer::new(&config.inner, &dataset.inner).map_err(py_err)?;
        if let Some(dir) = checkpoint_dir {
            inner = inner.with_checkpoint_dir(dir);
        }
        Ok(Self {
            inner,
            dataset: dataset.inner.clone(),
        })
    }

    /// Resumes from a checkpoint file written by `save`.
    #[staticmethod]
    fn resume(path: PathBuf, dataset: &PyDataset) -> PyResult<Self> {
        let ck = trainer::load_checkpoint(path).map_err(py_err)?;
        let inner = trainer::Trainer::resume(&ck, &dataset.inner).map_err(py_err)?;
        Ok(Self {
            inner,
            dataset: dataset.inner.clone(),
        })
    }

    /// Trains one epoch and returns its record.
    fn run_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let rec = self.inner.run_epoch().map_err(py_err)?;
        serialize(py, &rec)
    }

    /// Trains the remaining epochs and returns the per-epoch records.
    fn fit<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        self.inner.fit().map_err(py_err)?;
        serialize(py, &self.inner.history().epochs)
    }

    #[getter]
    fn epochs_done(&self) -> usize {
        self.inner.epochs_done()
    }

    fn counters<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &self.inner.counters())
    }

    fn step_log<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &self.inner.step_log())
    }

    fn save(&self, path: PathBuf) -> PyResult<String> {
        let ck = self.inner.checkpoint().map_err(py_err)?;
        let written = trainer::save_checkpoint(&ck, path).map_err(py_err)?;
        Ok(written.display().to_string())
    }

    /// Ridge-probe forecasting metrics on the trainer's dataset.
    #[pyo3(signature = (horizons = None))]
    fn evaluate_forecast<'py>(&self, py: Python<'py>, horizons: Option<Vec<usize>>) -> PyResult<Bound<'py, PyAny>> {
        let cfg = self.inner.config();
        let horizons = horizons.unwrap_or_else(|| cfg.eval.horizons.clone());
        let results = eval::evaluate_forecast(self.inner.encoder(), &self.dataset, cfg.window_len, &horizons, &cfg.eval.ridge_grid)
            .map_err(py_err)?;
        let rows = eval::forecast_rows(cfg.variant.name(), &self.dataset.name, &results, cfg.seed, &cfg.hash());
        serialize(py, &rows)
    }

    /// SVM-probe test accuracy on the trainer's dataset.
    fn evaluate_classification<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let r = eval::evaluate_classification(self.inner.encoder(), &self.dataset, &self.inner.config().eval.svm_c_grid)
            .map_err(py_err)?;
        let dict = PyDict::new(py);
        dict.set_item("dataset", r.dataset)?;
        dict.set_item("accuracy", r.accuracy)?;
        dict.set_item("n_test", r.n_test)?;
        dict.set_item("c", r.c)?;
        Ok(dict.into_any())
    }

    /// Eval-mode masks of the first `n` test instances, one list of row dicts each.
    #[pyo3(signature = (n = 1, channel = None))]
    fn export_masks<'py>(&self, py: Python<'py>, n: usize, channel: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let aug = self
            .inner
            .aug()
            .ok_or_else(|| PyValueError::new_err("this variant has no augmentation network"))?;
        let channel = channel.unwrap_or(self.dataset.n_features() - 1);
        let instances = eval::export_instances(&self.dataset, self.inner.config().window_len, n).map_err(py_err)?;
        let tables = instances
            .iter()
            .map(|x| eval::mask_table(aug, x, channel))
            .collect::<Result<Vec<_>, _>>()
            .map_err(py_err)?;
        serialize(py, &tables)
    }
}

/// Reads the configuration stored in a checkpoint file.
#[pyfunction]
fn checkpoint_config(path: PathBuf) -> PyResult<PyConfig> {
    let ck: Checkpoint = trainer::load_checkpoint(path).map_err(py_err)?;
    Ok(PyConfig { inner: ck.config })
}

fn hard_concrete(tau: f64, gamma: f64, zeta: f64) -> PyResult<HardConcreteParams> {
    let p = HardConcreteParams { tau, gamma, zeta };
    p.validate().map_err(py_err)?;
    Ok(p)
}

/// One hard-concrete draw from keep probability `pi` and uniform noise `eps`.
#[pyfunction]
#[pyo3(signature = (pi, eps, tau = 0.5, gamma = -0.1, zeta = 1.1))]
fn concrete_sample(pi: f64, eps: f64, tau: f64, gamma: f64, zeta: f64) -> PyResult<f64> {
    augment::concrete_sample(pi, eps, &hard_concrete(tau, gamma, zeta)?).map_err(py_err)
}

/// Expected number of nonzero mask entries.
#[pyfunction]
#[pyo3(signature = (pi, tau = 0.5, gamma = -0.1, zeta = 1.1))]
fn expected_l0(pi: Vec<f64>, tau: f64, gamma: f64, zeta: f64) -> PyResult<f64> {
    augment::expected_l0(&pi, &hard_concrete(tau, gamma, zeta)?).map_err(py_err)
}

/// `(P(h = 0), P(h = 1), E[h])` under the hard-concrete law.
#[pyfunction]
#[pyo3(signature = (pi, tau = 0.5, gamma = -0.1, zeta = 1.1))]
fn concrete_moments(pi: f64, tau: f64, gamma: f64, zeta: f64) -> PyResult<(f64, f64, f64)> {
    let p = hard_concrete(tau, gamma, zeta)?;
    Ok((p.prob_zero(pi), p.prob_one(pi), p.mean(pi)))
}

/// Mean length of maximal runs of ones in a mask.
#[pyfunction]
fn mean_one_run_length(h: Vec<f64>) -> Option<f64> {
    augment::mean_one_run_length(&h)
}

/// Mean accuracy and mean rank per method over classification result rows.
#[pyfunction]
fn rank_methods<'py>(py: Python<'py>, csv_paths: Vec<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let mut rows = Vec::new();
    for path in csv_paths {
        let table: Vec<eval::ClassifyRow> = eval::read_csv(&path).map_err(py_err)?;
        rows.extend(table.into_iter().map(|r| (r.method, r.dataset, r.accuracy)));
    }
    serialize(py, &eval::aggregate_ranks(&rows))
}

#[pymodule]
fn autotcl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(checkpoint_config, m)?)?;
    m.add_function(wrap_pyfunction!(concrete_sample, m)?)?;
    m.add_function(wrap_pyfunction!(expected_l0, m)?)?;
    m.add_function(wrap_pyfunction!(concrete_moments, m)?)?;
    m.add_function(wrap_pyfunction!(mean_one_run_length, m)?)?;
    m.add_function(wrap_pyfunction!(rank_methods, m)?)?;
    Ok(())
}
