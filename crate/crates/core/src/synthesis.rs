//! Constant and step-function input synthesis.
//!
//! Every construction reduces to one operator, `[e^{tU} − Id]⁻¹U·v`, applied
//! at a Jacobian `U` chosen by the method:
//!
//! | method            | `U`                | `v`                        |
//! |-------------------|--------------------|----------------------------|
//! | `LinearExact`     | `A = −D + W`       | `x¹ − e^{TA}x⁰`            |
//! | `ForwardNominal`  | `DN(φ_T(x⁰))`      | `x¹ − φ_T(x⁰)`             |
//! | `BackwardNominal` | `−DN(ψ_T(x¹))`     | `ψ_T(x¹) − x⁰`             |
//! | `LinearizedAtX0`  | `DN(x⁰)`           | `x¹ − e^{TA}x⁰`, minus `N(x⁰)` |
//!
//! The backward row uses `[Id − e^{−tV}]⁻¹V = [e^{t(−V)} − Id]⁻¹(−V)`.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{flow_backward, flow_forward, ControlInput, FlowError, FlowResult, IntegratorConfig, StepSchedule};
use crate::linalg::{
    eigenvalues, kernel_basis, matexp, pseudo_inverse_apply, solve, spectral_norm, KernelBasis, LinalgError, Matrix,
    Vector,
};
use crate::model::NetworkModel;

/// Below this `t·‖U‖` the transfer operator is evaluated from its power series.
pub const SERIES_THRESHOLD: f64 = 1e-4;

/// Spectral margins under this value still synthesize, with a warning.
pub const MARGIN_WARNING: f64 = 1e-6;

/// Relative tolerance of the projected residual in [`reachable_control`].
pub const CHART_TOL: f64 = 1e-6;

/// Relative tolerance of the Gramian quadrature.
pub const GRAMIAN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthesisError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(
        "singular system: {what} is not invertible (spectral condition violated, an eigenvalue \
         lies within {spectral_margin:.3e} of i2πℓ/T; rcond {rcond:.3e})"
    )]
    SingularSystem {
        what: &'static str,
        spectral_margin: f64,
        rcond: f64,
    },
    #[error("target is off the reachable chart (projected residual {residual:.3e} > {tolerance:.3e})")]
    TargetOffChart { residual: f64, tolerance: f64 },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "linear")]
    LinearExact,
    #[serde(rename = "forward")]
    ForwardNominal,
    #[serde(rename = "backward")]
    BackwardNominal,
    #[serde(rename = "linearized")]
    LinearizedAtX0,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::LinearExact,
        Method::ForwardNominal,
        Method::BackwardNominal,
        Method::LinearizedAtX0,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::LinearExact => "linear",
            Method::ForwardNominal => "forward",
            Method::BackwardNominal => "backward",
            Method::LinearizedAtX0 => "linearized",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method '{s}' (expected linear, forward, backward or linearized)"))
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisRequest<'a> {
    pub model: &'a NetworkModel,
    pub x0: Vector,
    pub x1: Vector,
    pub horizon: f64,
    pub method: Method,
    /// Length of the active window of a step input; `None` means constant input.
    pub tau: Option<f64>,
}

impl<'a> SynthesisRequest<'a> {
    pub fn new(model: &'a NetworkModel, x0: Vector, x1: Vector, horizon: f64, method: Method) -> Self {
        Self {
            model,
            x0,
            x1,
            horizon,
            method,
            tau: None,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = Some(tau);
        self
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        let d = self.model.dim();
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SynthesisError::Invalid(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau <= self.horizon) {
                return Err(SynthesisError::Invalid(format!(
                    "tau must satisfy 0 < tau <= T = {}, got {tau}",
                    self.horizon
                )));
            }
        }
        for (name, v) in [("x0", &self.x0), ("x1", &self.x1)] {
            if v.len() != d {
                return Err(SynthesisError::Invalid(format!(
                    "{name} has length {}, expected {d}",
                    v.len()
                )));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(SynthesisError::Invalid(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Length of the interval the input is active on.
    pub fn effective_horizon(&self) -> f64 {
        self.tau.unwrap_or(self.horizon)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Reciprocal condition estimate of the inverted `e^{tU} − Id` (or of
    /// the series matrix on the small-horizon route).
    pub rcond: f64,
    pub used_series: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    pub input: ControlInput,
    pub not_in_image: bool,
    /// `|B·u − rhs|`
    pub image_residual: f64,
    pub spectral_margin: f64,
    /// The vector `B·u` was solved for.
    pub predicted_rhs: Vector,
    /// `φ_T(x⁰)` for forward, `ψ_T(x¹)` for backward, `e^{TA}x⁰` for linear,
    /// `x⁰` for the linearized baseline.
    pub nominal_state: Vector,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCheck {
    pub ok: bool,
    pub margin: f64,
    pub tol: f64,
    pub eigenvalues: Vec<nalgebra::Complex<f64>>,
}

/// Default tolerance `1e-8·(1 + ‖A‖)` for [`spectral_condition`].
pub fn default_spectral_tol(a: &Matrix) -> f64 {
    1e-8 * (1.0 + spectral_norm(a))
}

/// Distance of `σ(A)` to `{i·2πℓ/T : ℓ ∈ ℤ}`; `ok` when it exceeds `tol`.
pub fn spectral_condition(a: &Matrix, horizon: f64, tol: f64) -> Result<SpectralCheck, SynthesisError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SynthesisError::Invalid(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let spectrum = eigenvalues(a)?;
    let spacing = 2.0 * std::f64::consts::PI / horizon;
    let margin = spectrum
        .eigenvalues
        .iter()
        .map(|l| {
            let nearest = (l.im / spacing).round() * spacing;
            l.re.hypot(l.im - nearest)
        })
        .fold(f64::INFINITY, f64::min);
    Ok(SpectralCheck {
        ok: margin > tol,
        margin,
        tol,
        eigenvalues: spectrum.eigenvalues,
    })
}

/// `[e^{tU} − Id]⁻¹U·Y` together with conditioning information.
#[derive(Debug, Clone)]
pub struct Transfer {
    pub value: Matrix,
    pub spectral_margin: f64,
    pub diagnostics: Diagnostics,
}

/// Applies `[e^{tU} − Id]⁻¹U` to the columns of `y`.
///
/// Checks the spectral condition first. For `t·‖U‖` below
/// [`SERIES_THRESHOLD`] the operator is evaluated as
/// `t⁻¹·[Σₙ (tU)ⁿ/(n+1)!]⁻¹` to avoid the cancellation in `e^{tU} − Id`.
pub fn transfer(u: &Matrix, t: f64, y: &Matrix, what: &'static str) -> Result<Transfer, SynthesisError> {
    let check = spectral_condition(u, t, default_spectral_tol(u))?;
    let mut diagnostics = Diagnostics::default();
    if !check.ok {
        return Err(SynthesisError::SingularSystem {
            what,
            spectral_margin: check.margin,
            rcond: 0.0,
        });
    }
    if check.margin < MARGIN_WARNING {
        let msg = format!(
            "spectral margin {:.3e} of {what} is below {MARGIN_WARNING:e}",
            check.margin
        );
        warn!("{msg}");
        diagnostics.warnings.push(msg);
    }
    let d = u.nrows();
    let scaled = u * t;
    let singular = |e: LinalgError| match e {
        LinalgError::SingularSystem { rcond } => SynthesisError::SingularSystem {
            what,
            spectral_margin: check.margin,
            rcond,
        },
        other => other.into(),
    };
    let value = if spectral_norm(&scaled) < SERIES_THRESHOLD {
        let mut series = Matrix::identity(d, d);
        let mut term = Matrix::identity(d, d);
        for n in 1..30 {
            term = &term * &scaled / (n as f64 + 1.0);
            series += &term;
            if term.norm() < f64::EPSILON * 1e-2 {
                break;
            }
        }
        let solved = solve(&series, y).map_err(singular)?;
        diagnostics.rcond = solved.rcond;
        diagnostics.used_series = true;
        solved.solution / t
    } else {
        let lhs = matexp(u, t)? - Matrix::identity(d, d);
        let solved = solve(&lhs, &(u * y)).map_err(singular)?;
        diagnostics.rcond = solved.rcond;
        solved.solution
    };
    Ok(Transfer {
        value,
        spectral_margin: check.margin,
        diagnostics,
    })
}

fn transfer_vector(u: &Matrix, t: f64, v: &Vector, what: &'static str) -> Result<(Vector, Transfer), SynthesisError> {
    let y = Matrix::from_column_slice(v.len(), 1, v.as_slice());
    let tr = transfer(u, t, &y, what)?;
    Ok((tr.value.column(0).into_owned(), tr))
}

/// Solves `B·u = rhs` in the least-norm sense and wraps it as an input.
fn finish(
    req: &SynthesisRequest<'_>,
    rhs: Vector,
    nominal_state: Vector,
    tr: Transfer,
) -> Result<SynthesisResult, SynthesisError> {
    let (u, residual, not_in_image) = if req.model.has_identity_input() {
        (rhs.clone(), 0.0, false)
    } else {
        let ln = pseudo_inverse_apply(req.model.input_matrix(), &rhs)?;
        (ln.solution, ln.residual, ln.not_in_image)
    };
    if !u.iter().all(|v| v.is_finite()) {
        return Err(SynthesisError::SingularSystem {
            what: "the transfer operator",
            spectral_margin: tr.spectral_margin,
            rcond: tr.diagnostics.rcond,
        });
    }
    let input = match req.tau {
        Some(tau) => ControlInput::Step(StepSchedule::late_window(req.horizon, tau, u)),
        None => ControlInput::Constant(u),
    };
    Ok(SynthesisResult {
        input,
        not_in_image,
        image_residual: residual,
        spectral_margin: tr.spectral_margin,
        predicted_rhs: rhs,
        nominal_state,
        diagnostics: tr.diagnostics,
    })
}

/// Exact constant (or late-window step) input for a linear network.
pub fn synthesize_linear(req: &SynthesisRequest<'_>) -> Result<SynthesisResult, SynthesisError> {
    req.validate()?;
    if !req.model.activation().is_linear() {
        return Err(SynthesisError::Invalid(
            "linear synthesis needs a Linear activation".into(),
        ));
    }
    let a = req.model.linear_part();
    let free = matexp(&a, req.horizon)? * &req.x0;
    let (rhs, tr) = transfer_vector(&a, req.effective_horizon(), &(&req.x1 - &free), "e^{TA} - Id")?;
    finish(req, rhs, free, tr)
}

/// Explicit synthesis around the free-flow endpoint `φ_T(x⁰)`.
pub fn synthesize_forward(
    req: &SynthesisRequest<'_>,
    cfg: &IntegratorConfig,
) -> Result<SynthesisResult, SynthesisError> {
    req.validate()?;
    let anchor = flow_forward(req.model, &req.x0, req.horizon, cfg)?.terminal_state;
    let u_mat = req.model.drift_jacobian(&anchor);
    let (rhs, tr) = transfer_vector(
        &u_mat,
        req.effective_horizon(),
        &(&req.x1 - &anchor),
        "e^{T U_T(x0)} - Id",
    )?;
    finish(req, rhs, anchor, tr)
}

/// Explicit synthesis around the pulled-back target `ψ_T(x¹)`.
pub fn synthesize_backward(
    req: &SynthesisRequest<'_>,
    cfg: &IntegratorConfig,
) -> Result<SynthesisResult, SynthesisError> {
    req.validate()?;
    let pulled = flow_backward(req.model, &req.x1, req.horizon, cfg)?.terminal_state;
    let v_mat = -req.model.drift_jacobian(&pulled);
    let (rhs, tr) = transfer_vector(
        &v_mat,
        req.effective_horizon(),
        &(&pulled - &req.x0),
        "Id - e^{-T V_T(x1)}",
    )?;
    finish(req, rhs, pulled, tr)
}

/// `(e^{TA} − Id)⁻¹A(x¹ − e^{TA}x⁰) − N(x⁰)` with `A = DN(x⁰)`, ignoring the
/// model's input matrix (the formula assumes `B = Id`).
pub fn linearized_control(
    model: &NetworkModel,
    x0: &Vector,
    x1: &Vector,
    horizon: f64,
) -> Result<(Vector, Transfer), SynthesisError> {
    let a = model.drift_jacobian(x0);
    let free = matexp(&a, horizon)? * x0;
    let (first, tr) = transfer_vector(&a, horizon, &(x1 - free), "e^{T DN(x0)} - Id")?;
    Ok((first - model.drift(x0), tr))
}

/// Linearization baseline; fully actuated models only.
pub fn synthesize_linearized(req: &SynthesisRequest<'_>) -> Result<SynthesisResult, SynthesisError> {
    req.validate()?;
    if !req.model.has_identity_input() {
        return Err(SynthesisError::Invalid(
            "the linearization baseline needs B = Id".into(),
        ));
    }
    if req.tau.is_some() {
        return Err(SynthesisError::Invalid(
            "the linearization baseline has no step-function form".into(),
        ));
    }
    let (u, tr) = linearized_control(req.model, &req.x0, &req.x1, req.horizon)?;
    finish(req, u, req.x0.clone(), tr)
}

/// Dispatches on `req.method`.
pub fn synthesize(req: &SynthesisRequest<'_>, cfg: &IntegratorConfig) -> Result<SynthesisResult, SynthesisError> {
    match req.method {
        Method::LinearExact => synthesize_linear(req),
        Method::ForwardNominal => synthesize_forward(req, cfg),
        Method::BackwardNominal => synthesize_backward(req, cfg),
        Method::LinearizedAtX0 => synthesize_linearized(req),
    }
}

/// Minimum-energy open-loop control of a linear network.
#[derive(Debug, Clone)]
pub struct GramianControl {
    horizon: f64,
    a_transpose: Matrix,
    b_transpose: Matrix,
    /// `W_c⁻¹(x¹ − e^{TA}x⁰)`
    costate: Vector,
    pub gramian: Matrix,
    /// `‖u‖²_{L²}`
    pub energy: f64,
    /// `(t_j, u(t_j))` on a uniform grid over `[0, T]`.
    pub samples: Vec<(f64, Vector)>,
}

impl GramianControl {
    /// `u(t) = Bᵀe^{(T−t)Aᵀ}W_c⁻¹(x¹ − e^{TA}x⁰)`.
    pub fn at(&self, t: f64) -> Vector {
        let e = matexp(&self.a_transpose, self.horizon - t).expect("finite matrix exponential");
        &self.b_transpose * (e * &self.costate)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
}

/// Gauss–Kronrod 7/15 nodes and weights on `[−1, 1]` (non-negative half).
const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const GK_WEIGHTS_K: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const GK_WEIGHTS_G: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gauss_kronrod<F>(f: &F, a: f64, b: f64) -> (Matrix, f64)
where
    F: Fn(f64) -> Matrix,
{
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let centre = f(mid);
    let mut kronrod = &centre * GK_WEIGHTS_K[7];
    let mut gauss = &centre * GK_WEIGHTS_G[3];
    for i in 0..7 {
        let dx = half * GK_NODES[i];
        let pair = f(mid - dx) + f(mid + dx);
        kronrod += &pair * GK_WEIGHTS_K[i];
        if i % 2 == 1 {
            gauss += &pair * GK_WEIGHTS_G[i / 2];
        }
    }
    kronrod *= half;
    gauss *= half;
    let err = (&kronrod - gauss).norm();
    (kronrod, err)
}

/// Adaptive Gauss–Kronrod quadrature of a matrix-valued integrand.
fn integrate_matrix<F>(f: F, a: f64, b: f64, rel_tol: f64) -> Matrix
where
    F: Fn(f64) -> Matrix,
{
    let (total, err) = gauss_kronrod(&f, a, b);
    let mut pieces = vec![(a, b, total, err)];
    for _ in 0..2000 {
        let sum: Matrix = pieces.iter().fold(Matrix::zeros(0, 0), |acc, p| {
            if acc.is_empty() {
                p.2.clone()
            } else {
                acc + &p.2
            }
        });
        let err_total: f64 = pieces.iter().map(|p| p.3).sum();
        if err_total <= rel_tol * sum.norm().max(f64::MIN_POSITIVE) {
            return sum;
        }
        let worst = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let (lo, hi, _, _) = pieces.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (left, el) = gauss_kronrod(&f, lo, mid);
        let (right, er) = gauss_kronrod(&f, mid, hi);
        pieces.push((lo, mid, left, el));
        pieces.push((mid, hi, right, er));
    }
    pieces.into_iter().fold(
        Matrix::zeros(0, 0),
        |acc, p| if acc.is_empty() { p.2 } else { acc + p.2 },
    )
}

/// `W_c = ∫₀ᵀ e^{sA}BBᵀe^{sAᵀ} ds` by adaptive quadrature.
pub fn controllability_gramian(a: &Matrix, b: &Matrix, horizon: f64) -> Result<Matrix, SynthesisError> {
    if a.nrows() != a.ncols() || b.nrows() != a.nrows() {
        return Err(SynthesisError::Invalid(
            "Gramian needs square A and B with matching rows".into(),
        ));
    }
    let bbt = b * b.transpose();
    let gram = integrate_matrix(
        |s| {
            let e = matexp(a, s).expect("finite matrix exponential");
            &e * &bbt * e.transpose()
        },
        0.0,
        horizon,
        GRAMIAN_TOL,
    );
    Ok(gram)
}

/// Minimum-energy control steering a linear network from `x0` to `x1`.
pub fn gramian_control_linear(
    model: &NetworkModel,
    x0: &Vector,
    x1: &Vector,
    horizon: f64,
    n_eval: usize,
) -> Result<GramianControl, SynthesisError> {
    let d = model.dim();
    if !model.activation().is_linear() {
        return Err(SynthesisError::Invalid(
            "Gramian control needs a Linear activation".into(),
        ));
    }
    if x0.len() != d || x1.len() != d {
        return Err(SynthesisError::Invalid(format!("states must have length {d}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SynthesisError::Invalid(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let a = model.linear_part();
    let b = model.input_matrix();
    let gramian = controllability_gramian(&a, b, horizon)?;
    let delta = x1 - matexp(&a, horizon)? * x0;
    let y = Matrix::from_column_slice(d, 1, delta.as_slice());
    let costate = match solve(&gramian, &y) {
        Ok(s) => s.solution.column(0).into_owned(),
        Err(LinalgError::SingularSystem { rcond }) => {
            return Err(SynthesisError::SingularSystem {
                what: "the controllability Gramian",
                spectral_margin: f64::NAN,
                rcond,
            })
        }
        Err(e) => return Err(e.into()),
    };
    let energy = costate.dot(&delta);
    let mut control = GramianControl {
        horizon,
        a_transpose: a.transpose(),
        b_transpose: b.transpose(),
        costate,
        gramian,
        energy,
        samples: Vec::new(),
    };
    let n = n_eval.max(2);
    control.samples = (0..n)
        .map(|j| {
            let t = horizon * j as f64 / (n - 1) as f64;
            (t, control.at(t))
        })
        .collect();
    Ok(control)
}

/// Affine chart of the constant-input reachable set for `B = [e₁ … e_k]`.
#[derive(Debug, Clone)]
pub struct ReachableChart {
    /// `φ_T(x⁰)`
    pub anchor: Vector,
    /// Orthonormal basis `Q₂` of `ker M_T`, `d × k`.
    pub basis: KernelBasis,
    /// First `k` rows of `B_T = [e^{TU} − Id]⁻¹U`.
    pub v_t: Matrix,
    /// Remaining `d − k` rows of `B_T`.
    pub m_t: Matrix,
    pub horizon: f64,
    pub spectral_margin: f64,
}

impl ReachableChart {
    pub fn inputs(&self) -> usize {
        self.v_t.nrows()
    }

    /// `anchor + Q₂ξ`
    pub fn target(&self, xi: &Vector) -> Vector {
        &self.anchor + &self.basis.basis * xi
    }
}

fn is_canonical_input(model: &NetworkModel) -> bool {
    let b = model.input_matrix();
    *b == Matrix::identity(model.dim(), model.inputs())
}

/// Builds the chart of states reachable from `x0` at time `T` with constant
/// inputs on the first `k` coordinates.
pub fn reachable_chart(
    model: &NetworkModel,
    x0: &Vector,
    horizon: f64,
    cfg: &IntegratorConfig,
) -> Result<ReachableChart, SynthesisError> {
    let d = model.dim();
    let k = model.inputs();
    if !is_canonical_input(model) {
        return Err(SynthesisError::Invalid(
            "reachable charts need B = [e_1 ... e_k]".into(),
        ));
    }
    if x0.len() != d {
        return Err(SynthesisError::Invalid(format!("x0 must have length {d}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SynthesisError::Invalid(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let FlowResult {
        terminal_state: anchor, ..
    } = flow_forward(model, x0, horizon, cfg)?;
    let u_mat = model.drift_jacobian(&anchor);
    let tr = transfer(&u_mat, horizon, &Matrix::identity(d, d), "e^{T U_T(x0)} - Id")?;
    let v_t = tr.value.rows(0, k).into_owned();
    let m_t = tr.value.rows(k, d - k).into_owned();
    let basis = kernel_basis(&m_t)?;
    Ok(ReachableChart {
        anchor,
        basis,
        v_t,
        m_t,
        horizon,
        spectral_margin: tr.spectral_margin,
    })
}

/// `u = V_T(x¹ − φ_T(x⁰))` for a target on the chart.
pub fn reachable_control(chart: &ReachableChart, x1: &Vector) -> Result<Vector, SynthesisError> {
    if x1.len() != chart.anchor.len() {
        return Err(SynthesisError::Invalid(format!(
            "x1 must have length {}",
            chart.anchor.len()
        )));
    }
    let delta = x1 - &chart.anchor;
    let residual = chart.basis.reject(&delta).norm();
    let tolerance = CHART_TOL * delta.norm().max(1.0);
    if residual > tolerance {
        return Err(SynthesisError::TargetOffChart { residual, tolerance });
    }
    Ok(&chart.v_t * delta)
}
