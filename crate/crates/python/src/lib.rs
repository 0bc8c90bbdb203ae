//! Python module `panelqmle`.
//!
//! Panels and factor matrices cross the boundary as lists of rows. Configuration
//! objects are plain dicts with the same keys as the CLI's JSON files, and
//! reports come back as dicts.

use panelqmle_core::efficiency::{gamma_t_closed, EfficiencyReport};
use panelqmle_core::estimation::{
    estimate_factors_se, estimate_fixed_effects, estimate_qmle, EstimationOptions, FitResult,
};
use panelqmle_core::likelihood::{loglik_concentrated, ModelParams, PanelData};
use panelqmle_core::local_expansion::{
    efficient_score_orthogonality, lan_diagnostics, residual_ladder, smooth_simplification_check, Mode,
    PerturbationSpec, SmoothDesign,
};
use panelqmle_core::simulation::{
    compare_fe_qmle, mc_estimation, simulate_replication, DgpConfig, EstimatorChoice, TruthRecord,
};
use panelqmle_core::{DMatrix, DVector, PanelError};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(panelqmle, PanelQmleError, PyException);

fn to_py_err(e: PanelError) -> PyErr {
    match e {
        PanelError::InvalidInput(m) => PyValueError::new_err(m),
        other => PanelQmleError::new_err(other.to_string()),
    }
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// nalgebra serializes matrices as `[column-major data, nrows, ncols]` and
/// vectors as `[data, n, null]`; rewrite them as row lists and plain lists.
fn unpack_matrices(value: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match value {
        Value::Array(items) => {
            if let [Value::Array(data), Value::Number(nrows), ncols] = items.as_slice() {
                let nrows = nrows.as_u64().unwrap_or(0) as usize;
                let ncols = match ncols {
                    Value::Null => Some(None),
                    Value::Number(c) => c.as_u64().map(|c| Some(c as usize)),
                    _ => None,
                };
                if let Some(ncols) = ncols {
                    if data.len() == nrows * ncols.unwrap_or(1) && data.iter().all(Value::is_number) {
                        return match ncols {
                            None => Value::Array(data.clone()),
                            Some(c) => Value::Array(
                                (0..nrows)
                                    .map(|i| Value::Array((0..c).map(|j| data[j * nrows + i].clone()).collect()))
                                    .collect(),
                            ),
                        };
                    }
                }
            }
            Value::Array(items.into_iter().map(unpack_matrices).collect())
        }
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, unpack_matrices(v))).collect()),
        other => other,
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let text = unpack_matrices(value).to_string();
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn options(opts: Option<&Bound<'_, PyAny>>) -> PyResult<EstimationOptions> {
    opts.map_or_else(|| Ok(EstimationOptions::default()), from_py)
}

/// Balanced `N x T` panel.
#[pyclass(name = "Panel", module = "panelqmle", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyPanel {
    inner: PanelData,
}

#[pymethods]
impl PyPanel {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: PanelData::new(matrix(&rows)?).map_err(to_py_err)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn t(&self) -> usize {
        self.inner.t()
    }

    fn to_list(&self) -> Vec<Vec<f64>> {
        rows(self.inner.y())
    }

    fn __repr__(&self) -> String {
        format!("Panel(N={}, T={})", self.inner.n(), self.inner.t())
    }
}

/// Result of `estimate_qmle`.
#[pyclass(name = "Fit", module = "panelqmle", frozen)]
pub struct PyFit {
    inner: FitResult,
}

#[pymethods]
impl PyFit {
    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.params.alpha
    }

    #[getter]
    fn se_alpha(&self) -> f64 {
        self.inner.se_alpha
    }

    #[getter]
    fn delta(&self) -> Vec<f64> {
        self.inner.params.delta.iter().copied().collect()
    }

    #[getter]
    fn f(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.params.f)
    }

    #[getter]
    fn sigma2(&self) -> Vec<f64> {
        self.inner.params.dvec.iter().copied().collect()
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.inner.loglik
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn grad_norm(&self) -> f64 {
        self.inner.grad_norm
    }

    /// Asymptotic standard errors of the factor entries, row-major.
    fn factor_se(&self) -> Vec<f64> {
        estimate_factors_se(&self.inner)
    }

    /// 95% Wald interval for `alpha`.
    fn ci95(&self) -> (f64, f64) {
        let (a, s) = (self.inner.params.alpha, self.inner.se_alpha);
        (a - 1.96 * s, a + 1.96 * s)
    }

    /// Efficiency bounds evaluated at the estimates.
    fn bounds<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let p = &self.inner.params;
        to_py(py, &EfficiencyReport::compute(p.alpha, &p.f, &p.dvec).map_err(to_py_err)?)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Fit(alpha={:.6}, se_alpha={:.6}, converged={})",
            self.inner.params.alpha,
            self.inner.se_alpha,
            if self.inner.converged { "True" } else { "False" }
        )
    }
}

/// Simulates replication `rep` of a design; returns `(Panel, truth dict)`.
#[pyfunction]
#[pyo3(signature = (config, rep = 0))]
fn simulate<'py>(py: Python<'py>, config: &Bound<'py, PyAny>, rep: u64) -> PyResult<(PyPanel, Bound<'py, PyAny>)> {
    let config: DgpConfig = from_py(config)?;
    let (data, truth): (PanelData, TruthRecord) = simulate_replication(&config, rep).map_err(to_py_err)?;
    Ok((PyPanel { inner: data }, to_py(py, &truth)?))
}

#[pyfunction(name = "estimate_qmle")]
#[pyo3(signature = (panel, r, options = None))]
fn py_estimate_qmle(py: Python<'_>, panel: &PyPanel, r: usize, options: Option<&Bound<'_, PyAny>>) -> PyResult<PyFit> {
    let opts = self::options(options)?;
    let data = panel.inner.clone();
    let fit = py.detach(move || estimate_qmle(&data, r, &opts)).map_err(to_py_err)?;
    Ok(PyFit { inner: fit })
}

/// Within-group fixed-effects estimator with `r` interactive factors.
#[pyfunction(name = "estimate_fixed_effects")]
#[pyo3(signature = (panel, r, options = None))]
fn py_estimate_fixed_effects<'py>(
    py: Python<'py>,
    panel: &PyPanel,
    r: usize,
    options: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = self::options(options)?;
    let data = panel.inner.clone();
    let fit = py.detach(move || estimate_fixed_effects(&data, r, &opts)).map_err(to_py_err)?;
    to_py(py, &fit)
}

/// Concentrated quasi log-likelihood at `(alpha, delta, F, sigma2)`.
#[pyfunction]
fn loglik(
    panel: &PyPanel,
    alpha: f64,
    delta: Vec<f64>,
    f: Vec<Vec<f64>>,
    sigma2: Vec<f64>,
) -> PyResult<f64> {
    let t = panel.inner.t();
    let f = if f.is_empty() { DMatrix::zeros(t, 0) } else { matrix(&f)? };
    let params = ModelParams::new(alpha, DVector::from_vec(delta), f, DVector::from_vec(sigma2)).map_err(to_py_err)?;
    loglik_concentrated(&params, &panel.inner).map_err(to_py_err)
}

/// `gamma_T`, `nu_T` and the efficiency bounds for given `(alpha, F, sigma2)`.
#[pyfunction]
fn efficiency_bound<'py>(
    py: Python<'py>,
    alpha: f64,
    f: Vec<Vec<f64>>,
    sigma2: Vec<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let report = EfficiencyReport::compute(alpha, &matrix(&f)?, &DVector::from_vec(sigma2)).map_err(to_py_err)?;
    to_py(py, &report)
}

#[pyfunction]
fn gamma_t(alpha: f64, sigma2: Vec<f64>) -> PyResult<f64> {
    gamma_t_closed(alpha, &DVector::from_vec(sigma2)).map_err(to_py_err)
}

/// Monte Carlo bias, variance and coverage; `estimator` is `"qmle"` or `"fixed_effects"`.
#[pyfunction]
#[pyo3(signature = (config, reps, estimator = "qmle", options = None))]
fn monte_carlo<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    reps: usize,
    estimator: &str,
    options: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let config: DgpConfig = from_py(config)?;
    let choice = match estimator {
        "qmle" => EstimatorChoice::Qmle,
        "fixed_effects" => EstimatorChoice::FixedEffects,
        other => return Err(PyValueError::new_err(format!("unknown estimator {other:?}"))),
    };
    let opts = self::options(options)?;
    let summary = py
        .detach(move || mc_estimation(&config, reps, choice, &opts))
        .map_err(to_py_err)?;
    to_py(py, &summary)
}

#[pyfunction]
#[pyo3(signature = (config, reps, t_grid, options = None))]
fn compare_fe<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    reps: usize,
    t_grid: Vec<usize>,
    options: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let config: DgpConfig = from_py(config)?;
    let opts = self::options(options)?;
    let cmp = py
        .detach(move || compare_fe_qmle(&config, reps, &t_grid, &opts))
        .map_err(to_py_err)?;
    to_py(py, &cmp)
}

fn perturbation(atilde: f64, ftilde: &Bound<'_, PyAny>, mode: &str) -> PyResult<PerturbationSpec> {
    Ok(PerturbationSpec {
        atilde,
        ftilde: from_py(ftilde)?,
        mode: mode.parse::<Mode>().map_err(to_py_err)?,
    })
}

/// Local likelihood-ratio residuals along a list of `(N, T)` pairs.
#[pyfunction]
#[pyo3(signature = (config, ladder, atilde, ftilde, mode = "ell_infinity", reps = 200))]
fn lr_ladder<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    ladder: Vec<(usize, usize)>,
    atilde: f64,
    ftilde: &Bound<'py, PyAny>,
    mode: &str,
    reps: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let config: DgpConfig = from_py(config)?;
    let pert = perturbation(atilde, ftilde, mode)?;
    let report = py
        .detach(move || residual_ladder(&config, &ladder, &pert, reps))
        .map_err(to_py_err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (config, atilde, ftilde, mode = "ell_infinity", reps = 1000))]
fn lan<'py>(
    py: Python<'py>,
    config: &Bound<'py, PyAny>,
    atilde: f64,
    ftilde: &Bound<'py, PyAny>,
    mode: &str,
    reps: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let config: DgpConfig = from_py(config)?;
    let pert = perturbation(atilde, ftilde, mode)?;
    let report = py.detach(move || lan_diagnostics(&config, &pert, reps)).map_err(to_py_err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (config, reps = 1000))]
fn score_orthogonality<'py>(py: Python<'py>, config: &Bound<'py, PyAny>, reps: usize) -> PyResult<Bound<'py, PyAny>> {
    let config: DgpConfig = from_py(config)?;
    let report = py
        .detach(move || efficient_score_orthogonality(&config, reps))
        .map_err(to_py_err)?;
    to_py(py, &report)
}

#[pyfunction]
fn smooth_check<'py>(py: Python<'py>, design: &Bound<'py, PyAny>, t_grid: Vec<usize>) -> PyResult<Bound<'py, PyAny>> {
    let design: SmoothDesign = from_py(design)?;
    to_py(py, &smooth_simplification_check(&design, &t_grid).map_err(to_py_err)?)
}

#[pymodule]
pub fn panelqmle(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PanelQmleError", m.py().get_type::<PanelQmleError>())?;
    m.add_class::<PyPanel>()?;
    m.add_class::<PyFit>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(py_estimate_qmle, m)?)?;
    m.add_function(wrap_pyfunction!(py_estimate_fixed_effects, m)?)?;
    m.add_function(wrap_pyfunction!(loglik, m)?)?;
    m.add_function(wrap_pyfunction!(efficiency_bound, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_t, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo, m)?)?;
    m.add_function(wrap_pyfunction!(compare_fe, m)?)?;
    m.add_function(wrap_pyfunction!(lr_ladder, m)?)?;
    m.add_function(wrap_pyfunction!(lan, m)?)?;
    m.add_function(wrap_pyfunction!(score_orthogonality, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_check, m)?)?;
    Ok(())
}
