//! Python bindings for `prefflow-core`.
//!
//! Reports and specs cross the boundary as plain dicts (via JSON).

use std::path::PathBuf;

use prefflow_core::experiments::{
    self, derive_seed, ExperimentSpec, ModelKind, STREAM_EVAL, STREAM_TARGET,
};
use prefflow_core::flow::{BoxDomain, DensityModel, FlowArchitecture, FlowModel};
use prefflow_core::metrics::{self, MetricConfig, MmtvConfig, WassersteinConfig};
use prefflow_core::preference::{self, Diagnostics, ObjectiveConfig, Observation, PreferenceDataset};
use prefflow_core::targets::{TargetDensity, TargetName};
use prefflow_core::train::{self, OptimizerKind, TrainConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

/// One of the benchmark belief densities.
#[pyclass(name = "Target", module = "prefflow", frozen)]
struct PyTarget {
    inner: TargetDensity,
}

#[pymethods]
impl PyTarget {
    #[new]
    fn new(name: &str) -> PyResult<Self> {
        let name: TargetName = name.parse().map_err(value_err)?;
        Ok(Self { inner: TargetDensity::new(name) })
    }

    #[staticmethod]
    fn names() -> Vec<&'static str> {
        TargetName::ALL.iter().map(|t| t.as_str()).collect()
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.inner.name().as_str()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.inner.domain();
        (d.lower().to_vec(), d.upper().to_vec())
    }

    fn mean(&self) -> Vec<f64> {
        self.inner.mean()
    }

    /// Unnormalized log density.
    fn log_density(&self, x: Vec<f64>) -> PyResult<f64> {
        if x.len() != self.inner.dim() {
            return Err(value_err(format!("expected {} coordinates, got {}", self.inner.dim(), x.len())));
        }
        Ok(self.inner.log_density(&x))
    }

    fn sample(&self, py: Python<'_>, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        py.detach(|| self.inner.sample(n, seed)).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Target('{}')", self.inner.name().as_str())
    }
}

/// A list of ranked choice sets over a common dimension.
#[pyclass(name = "Dataset", module = "prefflow")]
struct PyDataset {
    inner: PreferenceDataset,
}

#[pymethods]
impl PyDataset {
    /// `observations` is a list of `(points, ranking)` pairs.
    #[new]
    fn new(dim: usize, observations: Vec<(Vec<Vec<f64>>, Vec<usize>)>) -> PyResult<Self> {
        let obs = observations.into_iter().map(|(p, r)| Observation::ranking(p, r)).collect();
        Ok(Self { inner: PreferenceDataset::new(dim, obs).map_err(value_err)? })
    }

    /// Simulated k-wise rankings of `target`.
    #[staticmethod]
    #[pyo3(signature = (target, n, k=5, s_true=1.0, w=1.0/3.0, seed=0))]
    fn generate(py: Python<'_>, target: &PyTarget, n: usize, k: usize, s_true: f64, w: f64, seed: u64) -> PyResult<Self> {
        let inner = py
            .detach(|| {
                let sampler = experiments::target_sampler(&target.inner, w)?;
                experiments::generate_dataset(&target.inner, &sampler, k, n, s_true, seed)
            })
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (_, inner) = experiments::load_dataset(&path).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let k = self.inner.k().unwrap_or(2);
        experiments::save_dataset(&path, &self.inner, k).map_err(value_err)
    }

    fn append(&mut self, points: Vec<Vec<f64>>, ranking: Vec<usize>) -> PyResult<()> {
        self.inner.push(Observation::ranking(points, ranking)).map_err(value_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn k(&self) -> Option<usize> {
        self.inner.k()
    }

    fn observations(&self) -> Vec<(Vec<Vec<f64>>, Vec<usize>)> {
        self.inner.observations().iter().map(|o| (o.points.clone(), o.ranking.clone())).collect()
    }

    fn winners(&self) -> Vec<Vec<f64>> {
        self.inner.winners().into_iter().map(<[f64]>::to_vec).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(dim={}, n={})", self.inner.dim(), self.inner.len())
    }
}

/// A trainable density: a normalizing flow or the factorized-normal baseline.
#[pyclass(name = "Model", module = "prefflow")]
struct PyModel {
    inner: Box<dyn DensityModel>,
}

fn domain_of(lower: Vec<f64>, upper: Vec<f64>) -> PyResult<BoxDomain> {
    BoxDomain::new(lower, upper).map_err(value_err)
}

#[pymethods]
impl PyModel {
    /// Flow on the box `[lower, upper]`. `arch` uses the `kind:layers:h1,h2` form.
    #[staticmethod]
    #[pyo3(signature = (lower, upper, arch=None, seed=0))]
    fn flow(lower: Vec<f64>, upper: Vec<f64>, arch: Option<&str>, seed: u64) -> PyResult<Self> {
        let domain = domain_of(lower, upper)?;
        let arch = match arch {
            Some(a) => a.parse::<FlowArchitecture>().map_err(value_err)?,
            None => FlowArchitecture::default_for(domain.dim()),
        };
        Ok(Self { inner: Box::new(FlowModel::new(domain, arch, seed).map_err(value_err)?) })
    }

    #[staticmethod]
    fn normal(lower: Vec<f64>, upper: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: Box::new(experiments::FactorizedNormalModel::new(domain_of(lower, upper)?)) })
    }

    #[staticmethod]
    #[pyo3(signature = (target, kind="flow", arch=None, seed=0))]
    fn for_target(target: &PyTarget, kind: &str, arch: Option<&str>, seed: u64) -> PyResult<Self> {
        let mut spec = ExperimentSpec::new(target.inner.name());
        spec.model = kind.parse::<ModelKind>().map_err(value_err)?;
        spec.architecture = arch.map(str::parse).transpose().map_err(value_err)?;
        let inner = spec.build_model(target.inner.domain(), seed).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Reads a flow or baseline checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: experiments::load_model(&path).map_err(value_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let json = self.inner.checkpoint_json().map_err(value_err)?;
        std::fs::write(path, json).map_err(value_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params().values().len()
    }

    fn log_density(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.log_density(&x).map_err(value_err)
    }

    fn sample(&self, py: Python<'_>, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        py.detach(|| self.inner.sample(n, seed)).map_err(value_err)
    }

    /// Maximizes the FS-MAP objective on `dataset`; returns the training report.
    #[pyo3(signature = (dataset, iterations=10_000, batch_size=4, learning_rate=3e-4, weight_decay=1e-6,
                        optimizer="adamax", s_lik=1.0, prior=true, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &PyDataset,
        iterations: usize,
        batch_size: usize,
        learning_rate: f64,
        weight_decay: f64,
        optimizer: &str,
        s_lik: f64,
        prior: bool,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let optimizer = match optimizer {
            "adamax" => OptimizerKind::Adamax,
            "adam" => OptimizerKind::Adam,
            other => return Err(value_err(format!("unknown optimizer '{other}'"))),
        };
        let cfg = TrainConfig {
            iterations,
            batch_size,
            learning_rate,
            weight_decay,
            optimizer,
            seed,
            ..TrainConfig::default()
        };
        let objective = ObjectiveConfig { s_lik, prior };
        let model = &mut self.inner;
        let report = py
            .detach(|| train::train(model.as_mut(), &dataset.inner, objective, &cfg))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        to_py(py, &report)
    }

    /// Held-out log-likelihood, W2 and MMTV against `target`.
    #[pyo3(signature = (target, heldout, s_lik=1.0, samples=5000, seed=0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        target: &PyTarget,
        heldout: &PyDataset,
        s_lik: f64,
        samples: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg = MetricConfig { samples, ..MetricConfig::default() };
        let report = py
            .detach(|| {
                let truth = target.inner.sample(samples, derive_seed(seed, STREAM_TARGET)).map_err(value_err)?;
                metrics::evaluate(self.inner.as_ref(), &truth, &heldout.inner, s_lik, &cfg, derive_seed(seed, STREAM_EVAL))
                    .map_err(value_err)
            })?;
        to_py(py, &report)
    }

    fn __repr__(&self) -> String {
        format!("Model(dim={}, params={})", self.inner.dim(), self.inner.params().values().len())
    }
}

/// Probability that `winner` beats the rest of the set.
#[pyfunction]
#[pyo3(signature = (f, winner, s=1.0))]
fn comparison_probability(f: Vec<f64>, winner: usize, s: f64) -> PyResult<f64> {
    if winner >= f.len() || f.len() < 2 {
        return Err(value_err("winner must index a set of at least two values"));
    }
    Ok(preference::comparison_probability(&f, winner, s))
}

/// Log-likelihood of a (partial) ranking given utilities `f`.
#[pyfunction]
#[pyo3(signature = (f, ranking, s=1.0))]
fn ranking_log_likelihood(f: Vec<f64>, ranking: Vec<usize>, s: f64) -> PyResult<f64> {
    let obs = Observation::ranking(vec![vec![0.0]; f.len()], ranking);
    obs.validate(1).map_err(value_err)?;
    Ok(obs.log_likelihood(&f, s, &mut Diagnostics::default()))
}

#[pyfunction]
#[pyo3(signature = (a, b, m=512, resamples=4, seed=0))]
fn wasserstein(py: Python<'_>, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, m: usize, resamples: usize, seed: u64) -> PyResult<f64> {
    let cfg = WassersteinConfig { m, resamples, seed };
    py.detach(|| metrics::wasserstein(&a, &b, &cfg)).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, bins=50))]
fn mmtv(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, bins: usize) -> PyResult<f64> {
    metrics::mmtv(&a, &b, &MmtvConfig { bins, ..MmtvConfig::default() }).map_err(value_err)
}

/// Default experiment spec for `target`, as a dict to edit and pass back.
#[pyfunction]
fn default_spec<'py>(py: Python<'py>, target: &str) -> PyResult<Bound<'py, PyAny>> {
    let name: TargetName = target.parse().map_err(value_err)?;
    to_py(py, &ExperimentSpec::new(name))
}

/// Runs every replicate of `spec`; returns the result with its aggregate.
#[pyfunction]
#[pyo3(signature = (spec, out_dir=None))]
fn run_experiment<'py>(py: Python<'py>, spec: &Bound<'py, PyDict>, out_dir: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let spec: ExperimentSpec = from_py(spec.as_any())?;
    let result = py
        .detach(|| experiments::run_experiment(&spec, out_dir.as_deref()))
        .map_err(value_err)?;
    to_py(py, &result)
}

#[pymodule]
fn prefflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTarget>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(comparison_probability, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein, m)?)?;
    m.add_function(wrap_pyfunction!(mmtv, m)?)?;
    m.add_function(wrap_pyfunction!(default_spec, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
