//! Python bindings. Vectors cross the boundary as lists of floats and
//! matrices as lists of rows.

use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use rnn_constctl::flow::{self, ControlInput, FlowError, IntegratorConfig, StepSchedule};
use rnn_constctl::harness::{self, Family, ModelSpec};
use rnn_constctl::linalg::{Matrix, Vector};
use rnn_constctl::model::NetworkModel;
use rnn_constctl::synthesis::{self, Method, SynthesisError, SynthesisRequest};

create_exception!(rnn_constctl, SingularSystemError, PyRuntimeError);
create_exception!(rnn_constctl, DivergenceError, PyRuntimeError);
create_exception!(rnn_constctl, TargetOffChartError, PyRuntimeError);

fn flow_err(e: FlowError) -> PyErr {
    match e {
        FlowError::Invalid(_) => PyValueError::new_err(e.to_string()),
        _ => DivergenceError::new_err(e.to_string()),
    }
}

fn synth_err(e: SynthesisError) -> PyErr {
    match e {
        SynthesisError::Invalid(_) => PyValueError::new_err(e.to_string()),
        SynthesisError::TargetOffChart { .. } => TargetOffChartError::new_err(e.to_string()),
        SynthesisError::Flow(f) => flow_err(f),
        _ => SingularSystemError::new_err(e.to_string()),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vector(v: Vec<f64>) -> Vector {
    Vector::from_vec(v)
}

fn list(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn integrator(rtol: f64, atol: f64) -> PyResult<IntegratorConfig> {
    let cfg = IntegratorConfig {
        rel_tol: rtol,
        abs_tol: atol,
        ..IntegratorConfig::default()
    };
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

/// Hopfield-type network `dx/dt = -D x + W f(x) + B u`.
#[pyclass(name = "Model", frozen, skip_from_py_object)]
struct PyModel {
    inner: NetworkModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: NetworkModel::from_json(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: NetworkModel::load(path).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn inputs(&self) -> usize {
        self.inner.inputs()
    }

    #[getter]
    fn activation(&self) -> &'static str {
        self.inner.activation().name()
    }

    fn drift(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&x)?;
        Ok(list(&self.inner.drift(&vector(x))))
    }

    fn drift_jacobian(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.check(&x)?;
        Ok(rows(&self.inner.drift_jacobian(&vector(x))))
    }

    fn linear_part(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.linear_part())
    }

    /// Copy with `B = [e_1 ... e_k]`.
    fn with_canonical_inputs(&self, k: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_canonical_inputs(k).map_err(value_err)?,
        })
    }

    /// `(gamma, lambda, lambda1)`
    fn contraction_margins(&self) -> (f64, f64, f64) {
        let m = self.inner.contraction_margins();
        (m.gamma, m.lambda, m.lambda1)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(dim={}, inputs={}, activation='{}')",
            self.inner.dim(),
            self.inner.inputs(),
            self.inner.activation().name()
        )
    }
}

impl PyModel {
    fn check(&self, x: &[f64]) -> PyResult<()> {
        if x.len() == self.inner.dim() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!(
                "vector has length {}, the model has dim {}",
                x.len(),
                self.inner.dim()
            )))
        }
    }
}

/// Draws a model from one of the experiment families.
#[pyfunction]
fn generate_model(family: &str, dim: usize, seed: u64) -> PyResult<PyModel> {
    let family: Family = family.parse().map_err(PyValueError::new_err)?;
    let inner = harness::generate_model(&ModelSpec { family, dim, seed }).map_err(value_err)?;
    Ok(PyModel { inner })
}

#[pyfunction]
#[pyo3(signature = (model, x0, x1, horizon, method, tau=None, rtol=1e-13, atol=1e-14))]
#[allow(clippy::too_many_arguments)]
fn synthesize<'py>(
    py: Python<'py>,
    model: &PyModel,
    x0: Vec<f64>,
    x1: Vec<f64>,
    horizon: f64,
    method: &str,
    tau: Option<f64>,
    rtol: f64,
    atol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = integrator(rtol, atol)?;
    let method: Method = method.parse().map_err(PyValueError::new_err)?;
    let mut req = SynthesisRequest::new(&model.inner, vector(x0), vector(x1), horizon, method);
    if let Some(t) = tau {
        req = req.with_tau(t);
    }
    let r = synthesis::synthesize(&req, &cfg).map_err(synth_err)?;
    let out = PyDict::new(py);
    match &r.input {
        ControlInput::Constant(u) => out.set_item("u", list(u))?,
        ControlInput::Step(s) => {
            out.set_item("u", list(&s.after))?;
            out.set_item("switch_time", s.switch_time)?;
        }
    }
    out.set_item("not_in_image", r.not_in_image)?;
    out.set_item("image_residual", r.image_residual)?;
    out.set_item("spectral_margin", r.spectral_margin)?;
    out.set_item("nominal_state", list(&r.nominal_state))?;
    out.set_item("rcond", r.diagnostics.rcond)?;
    out.set_item("used_series", r.diagnostics.used_series)?;
    out.set_item("warnings", r.diagnostics.warnings.clone())?;
    Ok(out)
}

/// `x(T)` under a constant input, or under `u` applied after `switch_time`.
#[pyfunction]
#[pyo3(signature = (model, x0, horizon, u=None, switch_time=None, rtol=1e-13, atol=1e-14))]
fn simulate(
    model: &PyModel,
    x0: Vec<f64>,
    horizon: f64,
    u: Option<Vec<f64>>,
    switch_time: Option<f64>,
    rtol: f64,
    atol: f64,
) -> PyResult<Vec<f64>> {
    let cfg = integrator(rtol, atol)?;
    let k = model.inner.inputs();
    let u = u.map(vector).unwrap_or_else(|| Vector::zeros(k));
    let input = match switch_time {
        None => ControlInput::Constant(u),
        Some(switch_time) => ControlInput::Step(StepSchedule {
            horizon,
            switch_time,
            before: Vector::zeros(k),
            after: u,
        }),
    };
    let r = flow::simulate_controlled(&model.inner, &vector(x0), &input, horizon, &cfg).map_err(flow_err)?;
    Ok(list(&r.terminal_state))
}

#[pyfunction]
#[pyo3(signature = (model, x0, horizon, rtol=1e-13, atol=1e-14))]
fn flow_forward(model: &PyModel, x0: Vec<f64>, horizon: f64, rtol: f64, atol: f64) -> PyResult<Vec<f64>> {
    let cfg = integrator(rtol, atol)?;
    let r = flow::flow_forward(&model.inner, &vector(x0), horizon, &cfg).map_err(flow_err)?;
    Ok(list(&r.terminal_state))
}

#[pyfunction]
#[pyo3(signature = (model, x1, horizon, rtol=1e-13, atol=1e-14))]
fn flow_backward(model: &PyModel, x1: Vec<f64>, horizon: f64, rtol: f64, atol: f64) -> PyResult<Vec<f64>> {
    let cfg = integrator(rtol, atol)?;
    let r = flow::flow_backward(&model.inner, &vector(x1), horizon, &cfg).map_err(flow_err)?;
    Ok(list(&r.terminal_state))
}

/// Spectral condition for `A`, or for `DN(at)` when a point is given.
#[pyfunction]
#[pyo3(signature = (model, horizon, at=None, tol=None))]
fn check_spectral<'py>(
    py: Python<'py>,
    model: &PyModel,
    horizon: f64,
    at: Option<Vec<f64>>,
    tol: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = match at {
        Some(x) => {
            model.check(&x)?;
            model.inner.drift_jacobian(&vector(x))
        }
        None => model.inner.linear_part(),
    };
    let tol = tol.unwrap_or_else(|| synthesis::default_spectral_tol(&m));
    let c = synthesis::spectral_condition(&m, horizon, tol).map_err(synth_err)?;
    let out = PyDict::new(py);
    out.set_item("ok", c.ok)?;
    out.set_item("margin", c.margin)?;
    out.set_item("tol", c.tol)?;
    let eig: Vec<(f64, f64)> = c.eigenvalues.iter().map(|l| (l.re, l.im)).collect();
    out.set_item("eigenvalues", eig)?;
    Ok(out)
}

/// Reachable-set chart at `x0` for `B = [e_1 ... e_k]`.
#[pyclass(name = "Chart", frozen)]
struct PyChart {
    inner: synthesis::ReachableChart,
}

#[pymethods]
impl PyChart {
    #[getter]
    fn anchor(&self) -> Vec<f64> {
        list(&self.inner.anchor)
    }

    /// `d x k` orthonormal basis, as rows.
    #[getter]
    fn basis(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.basis.basis)
    }

    #[getter]
    fn spectral_margin(&self) -> f64 {
        self.inner.spectral_margin
    }

    fn target(&self, xi: Vec<f64>) -> PyResult<Vec<f64>> {
        if xi.len() != self.inner.basis.dim() {
            return Err(PyValueError::new_err(format!(
                "xi must have length {}",
                self.inner.basis.dim()
            )));
        }
        Ok(list(&self.inner.target(&vector(xi))))
    }

    fn control(&self, x1: Vec<f64>) -> PyResult<Vec<f64>> {
        let u = synthesis::reachable_control(&self.inner, &vector(x1)).map_err(synth_err)?;
        Ok(list(&u))
    }
}

#[pyfunction]
#[pyo3(signature = (model, x0, horizon, k, rtol=1e-13, atol=1e-14))]
fn reachable(model: &PyModel, x0: Vec<f64>, horizon: f64, k: usize, rtol: f64, atol: f64) -> PyResult<PyChart> {
    let cfg = integrator(rtol, atol)?;
    let actuated = model.inner.with_canonical_inputs(k).map_err(value_err)?;
    let inner = synthesis::reachable_chart(&actuated, &vector(x0), horizon, &cfg).map_err(synth_err)?;
    Ok(PyChart { inner })
}

#[pymodule]
#[pyo3(name = "rnn_constctl")]
fn rnn_constctl_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyChart>()?;
    m.add_function(wrap_pyfunction!(generate_model, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(flow_forward, m)?)?;
    m.add_function(wrap_pyfunction!(flow_backward, m)?)?;
    m.add_function(wrap_pyfunction!(check_spectral, m)?)?;
    m.add_function(wrap_pyfunction!(reachable, m)?)?;
    let py = m.py();
    m.add("SingularSystemError", py.get_type::<SingularSystemError>())?;
    m.add("DivergenceError", py.get_type::<DivergenceError>())?;
    m.add("TargetOffChartError", py.get_type::<TargetOffChartError>())?;
    Ok(())
}
