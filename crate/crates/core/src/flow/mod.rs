//! Uncontrolled flows `φ_t`, inverse flows `ψ_t` and controlled simulation.
//!
//! All integration goes through one adaptive explicit Runge-Kutta driver
//! built on an embedded 9(8) pair. A step is accepted when
//! `RMS(ε) < abs_tol + rel_tol · RMS(x)`, where `ε` is the embedded error
//! estimate and `x` the larger (in RMS) of the states at either end of the
//! step.

mod tableau;

use thiserror::Error;

use crate::linalg::{Matrix, Vector};
use crate::model::NetworkModel;

/// States with any component beyond this magnitude abort integration.
pub const DIVERGENCE_BOUND: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("integration exceeded the budget of {max_steps} steps at t = {t}")]
    IntegrationBudgetExceeded { max_steps: usize, t: f64 },
    #[error("state diverged (|x_i| > {DIVERGENCE_BOUND:e} or non-finite) at t = {t}")]
    Divergence { t: f64 },
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("invalid integration request: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-13,
            abs_tol: 1e-14,
            max_steps: 1_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        let ok = self.abs_tol > 0.0 && self.abs_tol <= self.rel_tol && self.rel_tol < 1e-3 && self.max_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(FlowError::Invalid(format!(
                "tolerances must satisfy 0 < abs_tol <= rel_tol < 1e-3 (got abs {:e}, rel {:e})",
                self.abs_tol, self.rel_tol
            )))
        }
    }
}

/// Terminal state of an integration plus work counters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub terminal_state: Vector,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub rhs_evaluations: usize,
}

impl FlowResult {
    fn start(x: Vector) -> Self {
        Self {
            terminal_state: x,
            steps_accepted: 0,
            steps_rejected: 0,
            rhs_evaluations: 0,
        }
    }

    fn absorb(&mut self, next: FlowResult) {
        self.terminal_state = next.terminal_state;
        self.steps_accepted += next.steps_accepted;
        self.steps_rejected += next.steps_rejected;
        self.rhs_evaluations += next.rhs_evaluations;
    }
}

/// Input that is zero on `[0, switch_time]` and `after` on `(switch_time, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub horizon: f64,
    pub switch_time: f64,
    pub before: Vector,
    pub after: Vector,
}

impl StepSchedule {
    /// Zero input until `horizon − window`, then `u`.
    pub fn late_window(horizon: f64, window: f64, u: Vector) -> Self {
        Self {
            horizon,
            switch_time: horizon - window,
            before: Vector::zeros(u.len()),
            after: u,
        }
    }

    pub fn validate(&self, k: usize) -> Result<(), FlowError> {
        if !(0.0 <= self.switch_time && self.switch_time <= self.horizon) {
            return Err(FlowError::Invalid(format!(
                "switch time {} must lie in [0, {}]",
                self.switch_time, self.horizon
            )));
        }
        if self.before.len() != k || self.after.len() != k {
            return Err(FlowError::Invalid(format!("schedule values must have length {k}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlInput {
    Constant(Vector),
    Step(StepSchedule),
}

impl ControlInput {
    pub fn is_finite(&self) -> bool {
        match self {
            ControlInput::Constant(u) => u.iter().all(|v| v.is_finite()),
            ControlInput::Step(s) => s.before.iter().chain(s.after.iter()).all(|v| v.is_finite()),
        }
    }

    /// The input vector applied during the (last) active segment.
    pub fn active_value(&self) -> &Vector {
        match self {
            ControlInput::Constant(u) => u,
            ControlInput::Step(s) => &s.after,
        }
    }
}

fn rms(v: &Vector) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        (v.norm_squared() / v.len() as f64).sqrt()
    }
}

fn check_finite_state(x: &Vector, t: f64) -> Result<(), FlowError> {
    if x.iter().all(|v| v.is_finite() && v.abs() <= DIVERGENCE_BOUND) {
        Ok(())
    } else {
        Err(FlowError::Divergence { t })
    }
}

/// Integrates `ẋ = rhs(t, x)` from `t0` to `t1` (`t1 ≥ t0`).
fn integrate<F>(mut rhs: F, x0: &Vector, t0: f64, t1: f64, cfg: &IntegratorConfig) -> Result<FlowResult, FlowError>
where
    F: FnMut(f64, &Vector, &mut Vector),
{
    use tableau::{A, B_HIGH, B_LOW, C, EMBEDDED_ORDER, STAGES};

    cfg.validate()?;
    check_finite_state(x0, t0)?;
    let mut result = FlowResult::start(x0.clone());
    if t1 <= t0 {
        return Ok(result);
    }
    let n = x0.len();
    let mut x = x0.clone();
    let mut t = t0;
    let mut k: Vec<Vector> = vec![Vector::zeros(n); STAGES];
    let mut stage = Vector::zeros(n);
    let mut x_new = Vector::zeros(n);
    let mut err = Vector::zeros(n);

    rhs(t, &x, &mut k[0]);
    result.rhs_evaluations += 1;

    // Initial step from the usual derivative-magnitude heuristic.
    let tol0 = cfg.abs_tol + cfg.rel_tol * rms(&x);
    let d0 = rms(&x) / tol0;
    let d1 = rms(&k[0]) / tol0;
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(t1 - t0);

    let exponent = 1.0 / (EMBEDDED_ORDER as f64 + 1.0);
    let safety = 0.9;
    let mut prev_ratio = 1e-4_f64;
    let mut k0_current = true;
    let mut attempts = 0usize;

    loop {
        if attempts >= cfg.max_steps {
            return Err(FlowError::IntegrationBudgetExceeded {
                max_steps: cfg.max_steps,
                t,
            });
        }
        attempts += 1;
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        if h <= 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(FlowError::StepSizeUnderflow { t, h });
        }

        if !k0_current {
            rhs(t, &x, &mut k[0]);
            result.rhs_evaluations += 1;
        }
        for i in 1..STAGES {
            stage.copy_from(&x);
            for (j, kj) in k.iter().enumerate().take(i) {
                let a = A[i][j];
                if a != 0.0 {
                    stage.axpy(h * a, kj, 1.0);
                }
            }
            rhs(t + C[i] * h, &stage, &mut k[i]);
            result.rhs_evaluations += 1;
        }
        x_new.copy_from(&x);
        err.fill(0.0);
        for i in 0..STAGES {
            if B_HIGH[i] != 0.0 {
                x_new.axpy(h * B_HIGH[i], &k[i], 1.0);
            }
            let db = B_HIGH[i] - B_LOW[i];
            if db != 0.0 {
                err.axpy(h * db, &k[i], 1.0);
            }
        }

        let scale = cfg.abs_tol + cfg.rel_tol * rms(&x).max(rms(&x_new));
        let ratio = rms(&err) / scale;
        if !ratio.is_finite() {
            // Overflow inside the stages: shrink hard and retry.
            result.steps_rejected += 1;
            h *= 0.1;
            k0_current = true;
            continue;
        }

        if ratio < 1.0 {
            t = if last { t1 } else { t + h };
            std::mem::swap(&mut x, &mut x_new);
            check_finite_state(&x, t)?;
            result.steps_accepted += 1;
            if last {
                break;
            }
            // PI controller on the error ratio.
            let factor = safety * ratio.max(1e-10).powf(-0.7 * exponent) * prev_ratio.powf(0.4 * exponent);
            h *= factor.clamp(0.2, 5.0);
            prev_ratio = ratio.max(1e-4);
            k0_current = false;
        } else {
            result.steps_rejected += 1;
            let factor = safety * ratio.powf(-exponent);
            h *= factor.clamp(0.1, 0.9);
            k0_current = true;
        }
    }

    result.terminal_state = x;
    Ok(result)
}

fn check_state(model: &NetworkModel, x: &Vector, horizon: f64) -> Result<(), FlowError> {
    if x.len() != model.dim() {
        return Err(FlowError::Invalid(format!(
            "state has length {}, model dimension is {}",
            x.len(),
            model.dim()
        )));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(FlowError::Invalid(format!(
            "horizon must be finite and >= 0, got {horizon}"
        )));
    }
    Ok(())
}

/// `φ_T(x⁰)`: solution of `ẋ = N(x)` at time `T`.
pub fn flow_forward(
    model: &NetworkModel,
    x0: &Vector,
    horizon: f64,
    cfg: &IntegratorConfig,
) -> Result<FlowResult, FlowError> {
    check_state(model, x0, horizon)?;
    integrate(|_, x, out| model.drift_into(x, out), x0, 0.0, horizon, cfg)
}

/// `ψ_T(x¹)`: solution of `ẋ = −N(x)` at time `T`, the inverse of `φ_T`.
///
/// The backward flow of a contracting network is expanding, so
/// [`FlowError::Divergence`] is an expected outcome for long horizons.
pub fn flow_backward(
    model: &NetworkModel,
    x1: &Vector,
    horizon: f64,
    cfg: &IntegratorConfig,
) -> Result<FlowResult, FlowError> {
    check_state(model, x1, horizon)?;
    integrate(
        |_, x, out| {
            model.drift_into(x, out);
            out.neg_mut();
        },
        x1,
        0.0,
        horizon,
        cfg,
    )
}

fn integrate_constant(
    model: &NetworkModel,
    x0: &Vector,
    u: &Vector,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<FlowResult, FlowError> {
    let bu = model.input_matrix() * u;
    integrate(
        |_, x, out| {
            model.drift_into(x, out);
            *out += &bu;
        },
        x0,
        t0,
        t1,
        cfg,
    )
}

/// `x(T)` for `ẋ = N(x) + Bu` under a constant or step input. Step inputs
/// restart the integrator exactly at the switch time.
pub fn simulate_controlled(
    model: &NetworkModel,
    x0: &Vector,
    input: &ControlInput,
    horizon: f64,
    cfg: &IntegratorConfig,
) -> Result<FlowResult, FlowError> {
    check_state(model, x0, horizon)?;
    let k = model.inputs();
    match input {
        ControlInput::Constant(u) => {
            if u.len() != k {
                return Err(FlowError::Invalid(format!("input must have length {k}")));
            }
            integrate_constant(model, x0, u, 0.0, horizon, cfg)
        }
        ControlInput::Step(schedule) => {
            schedule.validate(k)?;
            if (schedule.horizon - horizon).abs() > 1e-12 * horizon.max(1.0) {
                return Err(FlowError::Invalid(format!(
                    "schedule horizon {} does not match {}",
                    schedule.horizon, horizon
                )));
            }
            let mut total = FlowResult::start(x0.clone());
            let first = integrate_constant(model, x0, &schedule.before, 0.0, schedule.switch_time, cfg)?;
            total.absorb(first);
            let mid = total.terminal_state.clone();
            let second = integrate_constant(model, &mid, &schedule.after, schedule.switch_time, horizon, cfg)?;
            total.absorb(second);
            Ok(total)
        }
    }
}

/// `x(T)` for `ẋ = N(x) + B u(t)` with an arbitrary (smooth) input signal.
pub fn simulate_time_varying<F>(
    model: &NetworkModel,
    x0: &Vector,
    input: F,
    horizon: f64,
    cfg: &IntegratorConfig,
) -> Result<FlowResult, FlowError>
where
    F: Fn(f64) -> Vector,
{
    check_state(model, x0, horizon)?;
    let b = model.input_matrix();
    integrate(
        |t, x, out| {
            model.drift_into(x, out);
            out.gemv(1.0, b, &input(t), 1.0);
        },
        x0,
        0.0,
        horizon,
        cfg,
    )
}

/// Central finite-difference estimate of `Dφ_T(x⁰)` with perturbation
/// `h = 1e-6 · max(1, |x⁰|)`.
pub fn flow_jacobian_fd(
    model: &NetworkModel,
    x0: &Vector,
    horizon: f64,
    cfg: &IntegratorConfig,
) -> Result<Matrix, FlowError> {
    check_state(model, x0, horizon)?;
    let d = model.dim();
    let h = 1e-6 * x0.norm().max(1.0);
    let mut jac = Matrix::zeros(d, d);
    for j in 0..d {
        let mut plus = x0.clone();
        let mut minus = x0.clone();
        plus[j] += h;
        minus[j] -= h;
        let fp = flow_forward(model, &plus, horizon, cfg)?.terminal_state;
        let fm = flow_forward(model, &minus, horizon, cfg)?.terminal_state;
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}
