//! Python bindings: synthetic data, experiment configs, single runs, suites,
//! linear reducers, checkpoints and the built-in checks.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fdrmfl_core::baselines::{LinearReducer, ReducerKind};
use fdrmfl_core::datagen::{self, Link, ModalSample, SyntheticConfig};
use fdrmfl_core::fedsim::{TrainOptions, TrainOutcome};
use fdrmfl_core::harness::{self, ExperimentConfig, ResultsTable, Scenario};
use fdrmfl_core::losses;
use fdrmfl_core::model::{checkpoint, GlobalModel};

fn py_err(e: fdrmfl_core::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn link(v: u8) -> PyResult<Link> {
    Link::try_from(v).map_err(PyValueError::new_err)
}

fn sample_dict(py: Python<'_>, s: &ModalSample) -> PyResult<Py<PyAny>> {
    let d = pyo3::types::PyDict::new(py);
    for (name, t) in &s.modalities {
        d.set_item(name, (t.shape().to_vec(), t.data().to_vec()))?;
    }
    d.set_item("target", s.target)?;
    Ok(d.into_any().unbind())
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: datagen::Dataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn n_train(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.inner.test.len()
    }

    fn modality_names(&self) -> Vec<String> {
        self.inner.modality_names()
    }

    /// Standardized targets of one split ("train" or "test").
    fn targets(&self, split: &str) -> PyResult<Vec<f64>> {
        let s = match split {
            "train" => &self.inner.train,
            "test" => &self.inner.test,
            _ => return Err(PyValueError::new_err("split must be 'train' or 'test'")),
        };
        Ok(s.iter().map(|x| x.target).collect())
    }

    /// `{modality: (shape, flat data), "target": y}` for training sample `i`.
    fn sample(&self, py: Python<'_>, i: usize) -> PyResult<Py<PyAny>> {
        let s = self
            .inner
            .train
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("index {i} out of range")))?;
        sample_dict(py, s)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        datagen::snapshot::write(&self.inner, &path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        datagen::snapshot::read(&path).map(|inner| PyDataset { inner }).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (link_id, seed=0, n_train=2000, n_test=500, noise_std=0.0))]
fn generate_synthetic(link_id: u8, seed: u64, n_train: usize, n_test: usize, noise_std: f64) -> PyResult<PyDataset> {
    let mut cfg = SyntheticConfig::new(link(link_id)?, seed);
    cfg.n_train = n_train;
    cfg.n_test = n_test;
    cfg.noise_std = noise_std;
    datagen::generate(&cfg).map(|inner| PyDataset { inner }).map_err(py_err)
}

#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        PyConfig { inner: ExperimentConfig::default() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml(text).map(|inner| PyConfig { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(|inner| PyConfig { inner }).map_err(py_err)
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.inner.seed
    }
    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn get_repeats(&self) -> usize {
        self.inner.repeats
    }
    #[setter]
    fn set_repeats(&mut self, v: usize) {
        self.inner.repeats = v;
    }

    #[getter]
    fn get_methods(&self) -> Vec<String> {
        self.inner.methods.iter().map(|m| m.to_string()).collect()
    }
    #[setter]
    fn set_methods(&mut self, v: Vec<String>) -> PyResult<()> {
        self.inner.methods = harness::parse_methods(&v.join(",")).map_err(py_err)?;
        Ok(())
    }

    /// Shrinks the synthetic sizes and schedule, for quick experiments.
    #[pyo3(signature = (rounds=None, local_epochs=None, n_train=None, n_test=None))]
    fn shrink(
        &mut self,
        rounds: Option<usize>,
        local_epochs: Option<usize>,
        n_train: Option<usize>,
        n_test: Option<usize>,
    ) -> PyResult<()> {
        if let Some(r) = rounds {
            self.inner.round.rounds = r;
        }
        if let Some(e) = local_epochs {
            self.inner.round.local_epochs = e;
        }
        if let harness::DatasetSpec::Synthetic { n_train: a, n_test: b, .. } = &mut self.inner.dataset {
            if let Some(n) = n_train {
                *a = n;
            }
            if let Some(n) = n_test {
                *b = n;
            }
        }
        self.inner.validate().map_err(py_err)
    }

    fn scenarios(&self) -> Vec<String> {
        self.inner.scenarios().iter().map(|s| self.inner.scenario_name(s)).collect()
    }

    fn hyperparameters(&self) -> Vec<(String, String)> {
        self.inner.hyperparameters()
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: GlobalModel,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }

    fn flatten(&self) -> Vec<f64> {
        self.inner.flatten()
    }

    /// Predictions (standardized units) for every test sample.
    fn predict_test(&self, data: &PyDataset) -> PyResult<Vec<f64>> {
        self.inner
            .infer_all(&data.inner.test, 256)
            .map(|o| o.predictions)
            .map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        checkpoint::load(&path).map(|inner| PyModel { inner }).map_err(py_err)
    }
}

#[pyclass(name = "TrainResult", frozen)]
struct PyTrainResult {
    inner: TrainOutcome,
}

#[pymethods]
impl PyTrainResult {
    #[getter]
    fn pooled_test_mse(&self) -> f64 {
        self.inner.final_pooled_test_mse()
    }

    #[getter]
    fn client_test_mse(&self) -> Vec<f64> {
        self.inner.final_client_test_mse()
    }

    /// Pooled test MSE after each round, starting with the initial model.
    fn pooled_trace(&self) -> Vec<f64> {
        std::iter::once(&self.inner.initial)
            .chain(&self.inner.trace)
            .map(|r| r.pooled_test_mse)
            .collect()
    }

    /// `(round, client, step, pred, mi, kl, fcl, total)` per optimizer step.
    fn steps(&self) -> Vec<(usize, usize, usize, f64, f64, f64, f64, f64)> {
        self.inner
            .steps
            .iter()
            .map(|s| (s.round, s.client, s.step, s.pred, s.mi, s.kl, s.fcl, s.total))
            .collect()
    }

    fn model(&self) -> PyModel {
        PyModel { inner: self.inner.model.clone() }
    }
}

/// One seeded run of `method` on the config's first scenario.
#[pyfunction]
#[pyo3(signature = (config, method="fdrmfl", seed=None))]
fn train(py: Python<'_>, config: &PyConfig, method: &str, seed: Option<u64>) -> PyResult<PyTrainResult> {
    let cfg = config.inner.clone();
    let method: harness::Method = method.parse().map_err(py_err)?;
    let seed = seed.unwrap_or(cfg.seed);
    py.detach(move || {
        let scenario: Scenario = cfg
            .scenarios()
            .into_iter()
            .next()
            .ok_or_else(|| PyValueError::new_err("config has no scenarios"))?;
        let data = harness::realize(&cfg, &scenario, seed).map_err(py_err)?;
        harness::run_method(&cfg, method, &data, &TrainOptions::default())
            .map(|inner| PyTrainResult { inner })
            .map_err(py_err)
    })
}

#[pyclass(name = "ResultsTable", frozen)]
struct PyResultsTable {
    inner: ResultsTable,
    notes: Vec<String>,
}

#[pymethods]
impl PyResultsTable {
    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn to_markdown(&self) -> String {
        self.inner.to_markdown(&self.notes)
    }

    /// `(scenario, client, method, mean_mse, std_mse, n)` rows.
    fn rows(&self) -> Vec<(String, String, String, f64, f64, usize)> {
        self.inner
            .rows
            .iter()
            .map(|r| (r.scenario.clone(), r.client.to_string(), r.method.to_string(), r.mean_mse, r.std_mse, r.n))
            .collect()
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        ResultsTable::from_csv(text)
            .map(|inner| PyResultsTable { inner, notes: Vec::new() })
            .map_err(py_err)
    }
}

#[pyfunction]
fn run_suite(py: Python<'_>, config: &PyConfig) -> PyResult<PyResultsTable> {
    let cfg = config.inner.clone();
    py.detach(move || {
        harness::run_suite(&cfg, &harness::SuiteOptions::default())
            .map(|o| PyResultsTable { inner: o.table, notes: o.notes })
            .map_err(py_err)
    })
}

#[pyclass(name = "Reducer", frozen)]
struct PyReducer {
    inner: LinearReducer,
}

#[pymethods]
impl PyReducer {
    /// Fits `kind` ("pca", "tsvd" or "rp") on `n` row-major rows of width `d_in`.
    #[staticmethod]
    #[pyo3(signature = (kind, rows, d, seed=0))]
    fn fit(kind: &str, rows: Vec<Vec<f64>>, d: usize, seed: u64) -> PyResult<Self> {
        let kind = match kind {
            "pca" => ReducerKind::Pca,
            "tsvd" => ReducerKind::Tsvd,
            "rp" => ReducerKind::Rp,
            other => return Err(PyValueError::new_err(format!("unknown reducer '{other}'"))),
        };
        let n = rows.len();
        let d_in = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d_in) {
            return Err(PyValueError::new_err("ragged rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        LinearReducer::fit(kind, &flat, n, d_in, d, seed)
            .map(|inner| PyReducer { inner })
            .map_err(py_err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }

    fn transform(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.transform(&x).map_err(py_err)
    }

    /// Projection matrix as `d_in` rows of width `d`.
    fn components(&self) -> Vec<Vec<f64>> {
        self.inner
            .projection
            .data()
            .chunks(self.inner.output_dim())
            .map(<[f64]>::to_vec)
            .collect()
    }
}

#[pyfunction]
fn mse(pred: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    losses::mse_loss(&pred, &y).map_err(py_err)
}

#[pyfunction]
fn mean_std(values: Vec<f64>) -> (f64, f64) {
    harness::mean_std(&values)
}

/// `(name, passed, detail)` for each built-in check.
#[pyfunction]
fn run_checks(py: Python<'_>) -> Vec<(String, bool, String)> {
    py.detach(|| {
        harness::run_checks()
            .into_iter()
            .map(|c| (c.name.to_string(), c.passed, c.detail))
            .collect()
    })
}

#[pymodule]
fn fdrmfl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_class::<PyResultsTable>()?;
    m.add_class::<PyReducer>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(mean_std, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    Ok(())
}
