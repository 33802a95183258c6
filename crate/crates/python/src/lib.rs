//! Python bindings: kernels, per-user GP models, incidence matrices,
//! projections and whole-scenario runs.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use pdgp::gp::{self, GibbsSettings, GpModel, KernelParams, ShapeBounds, SurrogateKind};
use pdgp::runner::{simulate, Mode, SimOptions};
use pdgp::scenario::{build_scenario, ScenarioConfig};
use pdgp::solver;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn kind(name: &str) -> PyResult<SurrogateKind> {
    match name {
        "shape" => Ok(SurrogateKind::ShapeConstrained),
        "plain" => Ok(SurrogateKind::Plain),
        _ => Err(PyValueError::new_err(format!("unknown surrogate kind `{name}` (expected shape or plain)"))),
    }
}

#[pyclass(name = "KernelParams", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyKernelParams {
    inner: KernelParams,
}

#[pymethods]
impl PyKernelParams {
    #[new]
    #[pyo3(signature = (sigma_f, ell, sigma_n, mu0 = 0.0))]
    fn new(sigma_f: f64, ell: f64, sigma_n: f64, mu0: f64) -> PyResult<Self> {
        Ok(Self { inner: KernelParams::new(sigma_f, ell, sigma_n, mu0).map_err(err)? })
    }

    #[getter]
    fn sigma_f(&self) -> f64 {
        self.inner.sigma_f
    }

    #[getter]
    fn ell(&self) -> f64 {
        self.inner.ell
    }

    #[getter]
    fn sigma_n(&self) -> f64 {
        self.inner.sigma_n
    }

    #[getter]
    fn mu0(&self) -> f64 {
        self.inner.mu0
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!("KernelParams(sigma_f={}, ell={}, sigma_n={}, mu0={})", p.sigma_f, p.ell, p.sigma_n, p.mu0)
    }
}

/// One user's GP cost model with curvature enforcement on a uniform grid.
#[pyclass(name = "GpModel")]
struct PyGpModel {
    inner: GpModel,
}

#[pymethods]
impl PyGpModel {
    #[new]
    #[pyo3(signature = (params, gamma_u, l_u, lo, hi, q = 8))]
    fn new(params: &PyKernelParams, gamma_u: f64, l_u: f64, lo: f64, hi: f64, q: usize) -> PyResult<Self> {
        let bounds = ShapeBounds::new(gamma_u, l_u).map_err(err)?;
        Ok(Self { inner: GpModel::with_grid(params.inner, bounds, lo, hi, q).map_err(err)? })
    }

    fn add_feedback(&mut self, x: f64, z: f64) {
        self.inner.add_feedback(x, z);
    }

    /// Re-estimates the curvature at the enforcement points; returns True on clamping fallback.
    #[pyo3(signature = (seed, burn_in = 100, n_samples = 500))]
    fn refresh_curvature(&mut self, seed: u64, burn_in: usize, n_samples: usize) -> PyResult<bool> {
        self.inner.refresh_curvature(seed, &GibbsSettings { burn_in, n_samples }).map_err(err)
    }

    /// Plain posterior `(mean, variance)` at `x`.
    fn posterior(&self, x: f64) -> PyResult<(f64, f64)> {
        gp::gp_posterior(&self.inner, x).map_err(err)
    }

    /// Shape-constrained posterior `(mean, std)` at `x`.
    fn constrained_mean(&self, x: f64) -> PyResult<(f64, f64)> {
        gp::constrained_posterior_mean(&self.inner, x).map_err(err)
    }

    #[pyo3(signature = (x, delta, lo, hi, kind = "shape"))]
    fn gradient(&self, x: f64, delta: f64, lo: f64, hi: f64, kind: &str) -> PyResult<f64> {
        let s = self.inner.surrogate(self::kind(kind)?).map_err(err)?;
        s.gradient(x, delta, lo, hi).map_err(err)
    }

    #[getter]
    fn enforcement(&self) -> Vec<f64> {
        self.inner.enforcement.clone()
    }

    #[getter]
    fn curvature(&self) -> Vec<f64> {
        self.inner.u2_estimate.clone()
    }

    #[getter]
    fn n_feedback(&self) -> usize {
        self.inner.data.len()
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("model serializes")
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: serde_json::from_str(text).map_err(err)? })
    }
}

#[pyfunction]
fn se_kernel(x: f64, y: f64, params: &PyKernelParams) -> f64 {
    gp::se_kernel(x, y, &params.inner)
}

#[pyfunction]
fn deriv_cov_02(x: f64, y: f64, params: &PyKernelParams) -> f64 {
    gp::deriv_cov_02(x, y, &params.inner)
}

#[pyfunction]
fn deriv_cov_22(x: f64, y: f64, params: &PyKernelParams) -> f64 {
    gp::deriv_cov_22(x, y, &params.inner)
}

/// Augmented incidence matrix (row-major nested lists) and its spectral norm.
#[pyfunction]
fn incidence(device_users: Vec<usize>) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let t = pdgp::build_incidence(&device_users).map_err(err)?;
    let d = t.matrix();
    let rows = (0..d.nrows()).map(|i| d.row(i).iter().copied().collect()).collect();
    Ok((rows, t.omega()))
}

#[pyfunction]
fn project_interval(v: f64, lo: f64, hi: f64) -> PyResult<f64> {
    solver::project_interval(v, lo, hi).map_err(err)
}

#[pyfunction]
fn project_ball(v: Vec<f64>, radius: f64) -> Vec<f64> {
    solver::project_ball(&v, radius)
}

/// Simulates a scenario and returns `(summary, steps_csv)`. The summary is a
/// dict decoded from the same JSON the CLI writes.
#[pyfunction]
#[pyo3(signature = (config_toml = None, mode = "gp", seed = None, steps = None, oracle_cadence = None))]
fn run_scenario<'py>(
    py: Python<'py>,
    config_toml: Option<&str>,
    mode: &str,
    seed: Option<u64>,
    steps: Option<usize>,
    oracle_cadence: Option<usize>,
) -> PyResult<(Bound<'py, PyAny>, String)> {
    let mut cfg = match config_toml {
        Some(text) => ScenarioConfig::from_toml_str(text).map_err(err)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mode: Mode = mode.parse().map_err(PyValueError::new_err)?;
    let scenario = build_scenario(&cfg).map_err(err)?;
    let out = py
        .detach(|| simulate(&scenario, SimOptions { steps, oracle_cadence, ..SimOptions::new(mode) }))
        .map_err(err)?;
    let json = serde_json::to_string(&out.summary).expect("summary serializes");
    let summary = py.import("json")?.call_method1("loads", (json,))?;
    Ok((summary, out.csv))
}

#[pymodule]
fn pdgp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernelParams>()?;
    m.add_class::<PyGpModel>()?;
    m.add_function(wrap_pyfunction!(se_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(deriv_cov_02, m)?)?;
    m.add_function(wrap_pyfunction!(deriv_cov_22, m)?)?;
    m.add_function(wrap_pyfunction!(incidence, m)?)?;
    m.add_function(wrap_pyfunction!(project_interval, m)?)?;
    m.add_function(wrap_pyfunction!(project_ball, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
