//! Python bindings: metrics, data generation, and a trainable model handle.
//!
//! Structured results cross the boundary as JSON and are decoded with the
//! standard `json` module, so they arrive as plain dicts and lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde_json::json;

use diffpo_core::config::ExperimentConfig;
use diffpo_core::data::{generate as generate_data, Dataset, DgpKind, DgpSpec};
use diffpo_core::diffusion::{ScheduleConfig, ScheduleKind};
use diffpo_core::evaluation::{self, evaluate_model};
use diffpo_core::propensity::PerturbationPolicy;
use diffpo_core::training::{train, TrainedModel};

create_exception!(diffpo, DiffpoError, PyException);

fn err(e: diffpo_core::Error) -> PyErr {
    DiffpoError::new_err(format!("[{}] {e}", e.kind()))
}

fn to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (value.to_string(),))
}

fn parse_config(config: Option<&str>, smoke: bool) -> PyResult<ExperimentConfig> {
    let mut cfg = match config {
        Some(text) => ExperimentConfig::from_toml(text).map_err(err)?,
        None => ExperimentConfig::default(),
    };
    if smoke {
        cfg.apply_smoke();
    }
    cfg.resolve_seeds();
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn parse_kind(kind: &str) -> PyResult<DgpKind> {
    serde_json::from_value(json!(kind)).map_err(|_| DiffpoError::new_err(format!("unknown generator kind '{kind}'")))
}

/// Rows of equal width flattened row-major; `a` defaults to zeros.
fn dataset(x: Vec<Vec<f64>>, a: Option<Vec<f64>>, y: Option<Vec<f64>>) -> PyResult<Dataset> {
    let n = x.len();
    let d = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != d) {
        return Err(DiffpoError::new_err("covariate rows have different lengths"));
    }
    let flat = x.into_iter().flatten().collect();
    Dataset::new(
        flat,
        d,
        a.unwrap_or_else(|| vec![0.0; n]),
        y.unwrap_or_else(|| vec![0.0; n]),
    )
    .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, k = 1.0))]
fn wasserstein_1d(a: Vec<f64>, b: Vec<f64>, k: f64) -> PyResult<f64> {
    evaluation::wasserstein_1d(&a, &b, k).map_err(err)
}

#[pyfunction]
fn predictive_interval(samples: Vec<f64>, alpha: f64) -> PyResult<(f64, f64)> {
    evaluation::predictive_interval(&samples, alpha).map_err(err)
}

#[pyfunction]
fn pehe(tau_hat: Vec<f64>, tau: Vec<f64>) -> PyResult<f64> {
    evaluation::pehe(&tau_hat, &tau).map_err(err)
}

/// `{"beta", "alpha", "alpha_bar", "sigma"}`, each of length `steps`.
#[pyfunction]
#[pyo3(signature = (steps = 100, beta_start = 1e-4, beta_end = 0.5, kind = "quadratic"))]
fn schedule<'py>(
    py: Python<'py>,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let kind = match kind {
        "quadratic" => ScheduleKind::Quadratic,
        "linear" => ScheduleKind::Linear,
        other => return Err(DiffpoError::new_err(format!("unknown schedule kind '{other}'"))),
    };
    let s = ScheduleConfig {
        steps,
        beta_start,
        beta_end,
        kind,
        ..Default::default()
    }
    .build()
    .map_err(err)?;
    let col = |f: &dyn Fn(usize) -> f64| (1..=steps).map(f).collect::<Vec<f64>>();
    let value = json!({
        "beta": col(&|t| s.beta(t)),
        "alpha": col(&|t| s.alpha(t)),
        "alpha_bar": col(&|t| s.alpha_bar(t)),
        "sigma": col(&|t| s.sigma(t)),
    });
    to_py(py, &value)
}

/// Generated dataset as `{"x", "a", "y", "oracle"}`; `x` is a list of rows.
#[pyfunction]
#[pyo3(signature = (kind, n, seed = 0, d = None, selection_strength = None))]
fn generate<'py>(
    py: Python<'py>,
    kind: &str,
    n: usize,
    seed: u64,
    d: Option<usize>,
    selection_strength: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut spec = DgpSpec::new(parse_kind(kind)?, n, seed);
    spec.d = d;
    if let Some(s) = selection_strength {
        spec.selection_strength = s;
    }
    let data = generate_data(&spec).map_err(err)?;
    let rows: Vec<&[f64]> = (0..data.n()).map(|i| data.x_row(i)).collect();
    let value = json!({
        "x": rows,
        "a": data.treatment(),
        "y": data.outcome(),
        "oracle": data.oracle(),
    });
    to_py(py, &value)
}

/// Default experiment configuration as TOML text.
#[pyfunction]
#[pyo3(signature = (smoke = false))]
fn config_template(smoke: bool) -> PyResult<String> {
    let mut cfg = ExperimentConfig::default();
    if smoke {
        cfg.apply_smoke();
    }
    cfg.to_toml().map_err(err)
}

/// Generate or load data, train, and evaluate; returns the report dict.
/// The interpreter lock is released while the pipeline runs.
#[pyfunction]
#[pyo3(signature = (config = None, smoke = false))]
fn run<'py>(py: Python<'py>, config: Option<&str>, smoke: bool) -> PyResult<Bound<'py, PyAny>> {
    let cfg = parse_config(config, smoke)?;
    let report = py
        .detach(|| -> diffpo_core::Result<serde_json::Value> {
            let (train_set, test_set) = cfg.load_split()?;
            let model = train(&train_set, &cfg.train)?;
            let eval = evaluate_model(&model, &train_set, &test_set, &cfg.eval, &cfg.hash()?)?;
            serde_json::to_value(&eval.report).map_err(|e| diffpo_core::Error::Serialization(e.to_string()))
        })
        .map_err(err)?;
    to_py(py, &report)
}

/// A trained propensity model and denoiser.
#[pyclass(frozen)]
struct Model {
    inner: TrainedModel,
}

#[pymethods]
impl Model {
    /// Trains on `(x, a, y)` with the `[train]` section of `config` (TOML).
    #[staticmethod]
    #[pyo3(signature = (x, a, y, config = None, smoke = false))]
    fn fit(
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        a: Vec<f64>,
        y: Vec<f64>,
        config: Option<&str>,
        smoke: bool,
    ) -> PyResult<Self> {
        let cfg = parse_config(config, smoke)?;
        let data = dataset(x, Some(a), Some(y))?;
        let inner = py.detach(|| train(&data, &cfg.train)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TrainedModel::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// `m` draws of `Y(arm)` per row of `x`, in original outcome units.
    #[pyo3(signature = (x, arm, m = 100, seed = 0))]
    fn sample(&self, py: Python<'_>, x: Vec<Vec<f64>>, arm: usize, m: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let data = dataset(x, None, None)?;
        let flat = py.detach(|| self.inner.sample_arm(&data, arm, m, seed)).map_err(err)?;
        Ok(flat.chunks(m.max(1)).map(<[f64]>::to_vec).collect())
    }

    /// Clipped propensity estimates for the rows of `x`.
    fn propensity(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let data = self.inner.scaler.transform(&dataset(x, None, None)?).map_err(err)?;
        self.inner.propensity.predict(&data.masked_x()).map_err(err)
    }

    /// Inverse-propensity weights for `(x, a)`.
    fn weights(&self, x: Vec<Vec<f64>>, a: Vec<f64>) -> PyResult<Vec<f64>> {
        let data = self
            .inner
            .scaler
            .transform(&dataset(x, Some(a.clone()), None)?)
            .map_err(err)?;
        self.inner
            .propensity
            .weights(&data.masked_x(), &a, &PerturbationPolicy::none())
            .map_err(err)
    }

    #[getter]
    fn loss_trace(&self) -> Vec<f64> {
        self.inner.report.epoch_loss.clone()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.schedule.steps()
    }
}

#[pymodule]
fn diffpo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DiffpoError", m.py().get_type::<DiffpoError>())?;
    m.add_function(wrap_pyfunction!(wasserstein_1d, m)?)?;
    m.add_function(wrap_pyfunction!(predictive_interval, m)?)?;
    m.add_function(wrap_pyfunction!(pehe, m)?)?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(config_template, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
