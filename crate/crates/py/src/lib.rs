use meso_rmt::clt::{self, BaseFunction, CltConfig, TestFunction, VarianceOptions};
use meso_rmt::dyson::{self, SolverOptions};
use meso_rmt::ensemble::{self, Cumulant4, EnsembleSpec, EntryLaw, Family, ProfileSpec, VarianceProfile};
use meso_rmt::linalg::Range;
use meso_rmt::stability::{self, StabilityOptions};
use meso_rmt::twopoint::{self, LocalLawConfig};
use meso_rmt::C64;
use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn err(e: meso_rmt::Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn from_json_str<T: serde::de::DeserializeOwned>(s: &str) -> PyResult<T> {
    serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn family(name: &str) -> PyResult<Family> {
    from_json_str(&format!("\"{name}\""))
}

/// Variance profile S of size n x n.
#[pyclass(name = "Profile", module = "meso_rmt", skip_from_py_object)]
#[derive(Clone)]
struct PyProfile {
    inner: VarianceProfile,
}

#[pymethods]
impl PyProfile {
    #[staticmethod]
    fn constant(n: usize) -> PyResult<Self> {
        Ok(PyProfile { inner: ProfileSpec::constant().build(n).map_err(err)? })
    }

    #[staticmethod]
    fn smooth_kernel(n: usize) -> PyResult<Self> {
        Ok(PyProfile { inner: ProfileSpec::smooth_kernel().build(n).map_err(err)? })
    }

    #[staticmethod]
    fn block(blocks: Vec<Vec<f64>>, n: usize) -> PyResult<Self> {
        Ok(PyProfile { inner: ProfileSpec::block(blocks).build(n).map_err(err)? })
    }

    /// Builds from a profile document `{kind, n, params, c_inf, c_sup, holder_L}`.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyProfile { inner: VarianceProfile::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.to_string()
    }

    #[getter]
    fn c_inf(&self) -> f64 {
        self.inner.c_inf
    }

    #[getter]
    fn c_sup(&self) -> f64 {
        self.inner.c_sup
    }

    #[getter]
    fn holder_l(&self) -> f64 {
        self.inner.holder_l
    }

    /// Row-major entries s_jk.
    fn dense(&self) -> Vec<f64> {
        self.inner.dense().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Profile(kind={}, n={}, c_inf={:.4}, c_sup={:.4})", self.inner.kind, self.inner.n, self.inner.c_inf, self.inner.c_sup)
    }
}

/// Solution m(z) of the vector Dyson equation.
#[pyfunction]
#[pyo3(signature = (profile, z, tol = 1e-12))]
fn solve_vde(py: Python<'_>, profile: &PyProfile, z: Complex64, tol: f64) -> PyResult<Vec<Complex64>> {
    let opts = SolverOptions { tol, ..Default::default() };
    let p = &profile.inner;
    py.detach(|| dyson::solve_vde(p, z, None, &opts)).map(|s| s.m).map_err(err)
}

/// Stieltjes transform of the semicircle law.
#[pyfunction]
fn m_sc(z: Complex64) -> Complex64 {
    dyson::m_sc(z)
}

/// Density of states on a grid, as a dict with energies, rho and bulk intervals.
#[pyfunction]
#[pyo3(signature = (profile, e_min = -3.0, e_max = 3.0, n_points = 601, eta_probe = 1e-6, kappa = 0.1, threshold = 0.05))]
#[allow(clippy::too_many_arguments)]
fn density_grid<'py>(
    py: Python<'py>,
    profile: &PyProfile,
    e_min: f64,
    e_max: f64,
    n_points: usize,
    eta_probe: f64,
    kappa: f64,
    threshold: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let p = &profile.inner;
    let g = py
        .detach(|| dyson::density_grid(p, e_min, e_max, n_points, eta_probe, kappa, threshold, &SolverOptions::default()))
        .map_err(err)?;
    to_py(py, &g)
}

/// Eigenvalues of sample `index` of the ensemble.
#[pyfunction]
#[pyo3(signature = (profile, seed, index = 0, family = "gaussian", beta = 1))]
fn sample_eigenvalues(py: Python<'_>, profile: &PyProfile, seed: u64, index: u64, family: &str, beta: u8) -> PyResult<Vec<f64>> {
    let law = EntryLaw::new(self::family(family)?, beta).map_err(err)?;
    let spec = EnsembleSpec::new(profile.inner.clone(), law, seed).map_err(err)?;
    py.detach(|| ensemble::sample_matrix(&spec, index).eigenvalues(Range::All)).map_err(err)
}

/// Stability report of B = 1 - S m(z) m(zeta) as a dict.
#[pyfunction]
fn stability_report<'py>(py: Python<'py>, profile: &PyProfile, z: Complex64, zeta: Complex64) -> PyResult<Bound<'py, PyAny>> {
    let p = &profile.inner;
    let rep = py
        .detach(|| -> meso_rmt::Result<_> {
            let opts = SolverOptions::default();
            let a = dyson::solve_vde(p, z, None, &opts)?;
            let b = dyson::solve_vde(p, zeta, None, &opts)?;
            stability::build_stability_report(p, &a, &b, &StabilityOptions::default())
        })
        .map_err(err)?;
    to_py(py, &rep.to_json_value())
}

/// Squared H^{1/2} seminorm of a base function given as JSON, e.g. `{"family": "gaussian"}`.
#[pyfunction]
fn h_half_norm(base: &str) -> PyResult<f64> {
    clt::h_half_norm(&from_json_str::<BaseFunction>(base)?).map_err(err)
}

/// Limiting variance (2 beta pi^2)^-1 |g|^2_{H^1/2}.
#[pyfunction]
fn predict_variance(base: &str, beta: u8) -> PyResult<f64> {
    clt::predict_variance(&from_json_str::<BaseFunction>(base)?, beta).map_err(err)
}

/// Regularised kernel K~(x, y) at height eta_star.
#[pyfunction]
#[pyo3(signature = (profile, x, y, eta_star = 1e-6))]
fn kernel_k_tilde(profile: &PyProfile, x: f64, y: f64, eta_star: f64) -> PyResult<f64> {
    clt::kernel_k_tilde(&profile.inner, x, y, eta_star, &SolverOptions::default()).map_err(err)
}

/// Kernel K(z, zeta) for the given entry law.
#[pyfunction]
#[pyo3(signature = (profile, z, zeta, family = "gaussian", beta = 1))]
fn kernel_k(profile: &PyProfile, z: Complex64, zeta: Complex64, family: &str, beta: u8) -> PyResult<Complex64> {
    let law = EntryLaw::new(self::family(family)?, beta).map_err(err)?;
    let spec = EnsembleSpec::new(profile.inner.clone(), law, 0).map_err(err)?;
    let c4 = Cumulant4::from_spec(&spec);
    let k: C64 = clt::kernel_k(&spec.profile, z, zeta, &c4, beta, &SolverOptions::default()).map_err(err)?;
    Ok(k)
}

/// Variance by kernel quadrature next to the H^{1/2} prediction.
#[pyfunction]
#[pyo3(signature = (profile, base, e0, eta0, family = "gaussian", beta = 1, options = None))]
#[allow(clippy::too_many_arguments)]
fn variance_via_kernel<'py>(
    py: Python<'py>,
    profile: &PyProfile,
    base: &str,
    e0: f64,
    eta0: f64,
    family: &str,
    beta: u8,
    options: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let tf = TestFunction::new(from_json_str(base)?, e0, eta0).map_err(err)?;
    let opts: VarianceOptions = match options {
        Some(s) => from_json_str(s)?,
        None => VarianceOptions::default(),
    };
    let law = EntryLaw::new(self::family(family)?, beta).map_err(err)?;
    let spec = EnsembleSpec::new(profile.inner.clone(), law, 0).map_err(err)?;
    let c4 = Cumulant4::from_spec(&spec);
    let rep = py.detach(|| clt::variance_via_kernel(&spec.profile, &tf, &c4, beta, &opts)).map_err(err)?;
    to_py(py, &rep)
}

/// Runs a Monte Carlo CLT experiment from a JSON config; returns the summary dict.
#[pyfunction]
fn run_clt<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg: CltConfig = from_json_str(config)?;
    let rep = py.detach(|| cfg.run()).map_err(err)?;
    let mut summary = rep.summary_json();
    summary["statistics"] = serde_json::to_value(&rep.statistics).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &summary)
}

/// Runs a local-law experiment from a JSON config; returns the fit summary.
#[pyfunction]
fn run_local_law<'py>(py: Python<'py>, config: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg: LocalLawConfig = from_json_str(config)?;
    let rep = py.detach(|| twopoint::local_law_experiment(&cfg)).map_err(err)?;
    to_py(py, &rep.fit_summary())
}

#[pymodule]
fn meso_rmt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProfile>()?;
    m.add_function(wrap_pyfunction!(solve_vde, m)?)?;
    m.add_function(wrap_pyfunction!(m_sc, m)?)?;
    m.add_function(wrap_pyfunction!(density_grid, m)?)?;
    m.add_function(wrap_pyfunction!(sample_eigenvalues, m)?)?;
    m.add_function(wrap_pyfunction!(stability_report, m)?)?;
    m.add_function(wrap_pyfunction!(h_half_norm, m)?)?;
    m.add_function(wrap_pyfunction!(predict_variance, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_k_tilde, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_k, m)?)?;
    m.add_function(wrap_pyfunction!(variance_via_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(run_clt, m)?)?;
    m.add_function(wrap_pyfunction!(run_local_law, m)?)?;
    Ok(())
}
