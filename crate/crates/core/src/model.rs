//! The controlled network `ẋ = −Dx + W f(x) + Bu` and its drift.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{spectral_norm, Matrix, Vector};

/// Fixed gain inside the MINDy radical activation.
pub const MINDY_SLOPE: f64 = 20.0 / 3.0;

const CURVATURE_GRID_HALF_WIDTH: f64 = 10.0;
const CURVATURE_GRID_POINTS: usize = 100_000;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("failed to read model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse model file: {0}")]
    Parse(#[from] serde_json::Error),
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::Invalid(msg.into())
}

/// Elementwise nonlinearity `f`. Every family is C², globally Lipschitz and
/// satisfies `f(0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Linear,
    Tanh,
    /// `f(s) = √(α² + (bs + ½)²) − √(α² + (bs − ½)²)` with `b = 20/3` and a
    /// positive `α` per unit.
    Mindy {
        alpha: Vec<f64>,
    },
}

/// `f`, `f′` and `f″` evaluated componentwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationValues {
    pub value: Vector,
    pub slope: Vector,
    pub curvature: Vector,
}

fn mindy(alpha: f64, s: f64) -> (f64, f64, f64) {
    let b = MINDY_SLOPE;
    let a2 = alpha * alpha;
    let p = b * s + 0.5;
    let m = b * s - 0.5;
    let rp = (a2 + p * p).sqrt();
    let rm = (a2 + m * m).sqrt();
    let value = rp - rm;
    let slope = b * (p / rp - m / rm);
    let curvature = b * b * a2 * (1.0 / (rp * rp * rp) - 1.0 / (rm * rm * rm));
    (value, slope, curvature)
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Tanh => "tanh",
            Activation::Mindy { .. } => "mindy",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Activation::Linear)
    }

    /// `(f, f′, f″)` of unit `unit` at `s`.
    pub fn scalar(&self, unit: usize, s: f64) -> (f64, f64, f64) {
        match self {
            Activation::Linear => (s, 1.0, 0.0),
            Activation::Tanh => {
                let t = s.tanh();
                let sech2 = 1.0 - t * t;
                (t, sech2, -2.0 * t * sech2)
            }
            Activation::Mindy { alpha } => mindy(alpha[unit], s),
        }
    }

    pub fn eval(&self, x: &Vector) -> ActivationValues {
        let n = x.len();
        let mut value = Vector::zeros(n);
        let mut slope = Vector::zeros(n);
        let mut curvature = Vector::zeros(n);
        for i in 0..n {
            let (f, df, d2f) = self.scalar(i, x[i]);
            value[i] = f;
            slope[i] = df;
            curvature[i] = d2f;
        }
        ActivationValues {
            value,
            slope,
            curvature,
        }
    }

    /// `f(x)` only.
    pub fn value(&self, x: &Vector) -> Vector {
        match self {
            Activation::Linear => x.clone(),
            Activation::Tanh => x.map(f64::tanh),
            Activation::Mindy { alpha } => Vector::from_fn(x.len(), |i, _| mindy(alpha[i], x[i]).0),
        }
    }

    /// `f′(x)` only.
    pub fn slope(&self, x: &Vector) -> Vector {
        Vector::from_fn(x.len(), |i, _| self.scalar(i, x[i]).1)
    }

    /// `sup |f′|` over all units. The MINDy slope peaks at `s = 0` with value
    /// `b / √(α² + 1/4)`.
    pub fn slope_bound(&self) -> f64 {
        match self {
            Activation::Linear | Activation::Tanh => 1.0,
            Activation::Mindy { alpha } => alpha
                .iter()
                .map(|a| MINDY_SLOPE / (a * a + 0.25).sqrt())
                .fold(0.0, f64::max),
        }
    }

    /// `sup |f″|` over all units, from a uniform grid on [−10, 10].
    pub fn curvature_bound(&self) -> f64 {
        let grid_max = |alpha: Option<f64>| {
            let h = 2.0 * CURVATURE_GRID_HALF_WIDTH / (CURVATURE_GRID_POINTS - 1) as f64;
            (0..CURVATURE_GRID_POINTS)
                .map(|j| {
                    let s = -CURVATURE_GRID_HALF_WIDTH + j as f64 * h;
                    match alpha {
                        Some(a) => mindy(a, s).2.abs(),
                        None => Activation::Tanh.scalar(0, s).2.abs(),
                    }
                })
                .fold(0.0, f64::max)
        };
        match self {
            Activation::Linear => 0.0,
            Activation::Tanh => grid_max(None),
            Activation::Mindy { alpha } => {
                let mut distinct: Vec<f64> = alpha.clone();
                distinct.sort_by(f64::total_cmp);
                distinct.dedup();
                distinct.into_iter().map(|a| grid_max(Some(a))).fold(0.0, f64::max)
            }
        }
    }
}

/// Γ, Λ and Λ₁ of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionMargins {
    /// `λ_min(D) − ‖W‖·sup|f′|`; positive means the network is contracting.
    pub gamma: f64,
    /// `λ_max(D) + ‖W‖·sup|f′|`, a Lipschitz constant of the drift.
    pub lambda: f64,
    /// `‖W‖ · sup|f″|`.
    pub lambda1: f64,
}

/// Hopfield-type network with diagonal decay `D`, connectivity `W`, input
/// matrix `B` and activation `f`. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    decay: Vector,
    connectivity: Matrix,
    input: Matrix,
    activation: Activation,
    /// Cached `−D + W`.
    linear: Matrix,
}

impl NetworkModel {
    pub fn new(decay: Vector, connectivity: Matrix, input: Matrix, activation: Activation) -> Result<Self, ModelError> {
        let d = decay.len();
        if d == 0 {
            return Err(invalid("dimension must be at least 1"));
        }
        if decay.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("decay entries must be finite and strictly positive"));
        }
        if connectivity.shape() != (d, d) {
            return Err(invalid(format!(
                "W must be {d}x{d}, got {}x{}",
                connectivity.nrows(),
                connectivity.ncols()
            )));
        }
        if connectivity.iter().any(|v| !v.is_finite()) {
            return Err(invalid("W has non-finite entries"));
        }
        let k = input.ncols();
        if input.nrows() != d || k == 0 || k > d {
            return Err(invalid(format!(
                "B must be {d}xk with 1 <= k <= {d}, got {}x{}",
                input.nrows(),
                k
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(invalid("B has non-finite entries"));
        }
        if let Activation::Mindy { alpha } = &activation {
            if alpha.len() != d {
                return Err(invalid(format!(
                    "mindy activation needs {d} alpha values, got {}",
                    alpha.len()
                )));
            }
            if alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
                return Err(invalid("mindy alpha values must be strictly positive"));
            }
        }
        let mut linear = connectivity.clone();
        for i in 0..d {
            linear[(i, i)] -= decay[i];
        }
        Ok(Self {
            decay,
            connectivity,
            input,
            activation,
            linear,
        })
    }

    pub fn dim(&self) -> usize {
        self.decay.len()
    }

    /// Number of input channels `k`.
    pub fn inputs(&self) -> usize {
        self.input.ncols()
    }

    /// Diagonal of `D`.
    pub fn decay(&self) -> &Vector {
        &self.decay
    }

    pub fn connectivity(&self) -> &Matrix {
        &self.connectivity
    }

    pub fn input_matrix(&self) -> &Matrix {
        &self.input
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    /// Same network driven through a different input matrix.
    pub fn with_input_matrix(&self, input: Matrix) -> Result<Self, ModelError> {
        Self::new(
            self.decay.clone(),
            self.connectivity.clone(),
            input,
            self.activation.clone(),
        )
    }

    /// Same network with canonical actuation `B = [e₁ … e_k]`.
    pub fn with_canonical_inputs(&self, k: usize) -> Result<Self, ModelError> {
        let d = self.dim();
        self.with_input_matrix(Matrix::from_fn(d, k, |i, j| if i == j { 1.0 } else { 0.0 }))
    }

    pub fn has_identity_input(&self) -> bool {
        let d = self.dim();
        self.input.shape() == (d, d) && self.input == Matrix::identity(d, d)
    }

    /// `A = −D + W`.
    pub fn linear_part(&self) -> Matrix {
        self.linear.clone()
    }

    /// `N(x) = −Dx + W f(x)`.
    pub fn drift(&self, x: &Vector) -> Vector {
        let mut out = Vector::zeros(x.len());
        self.drift_into(x, &mut out);
        out
    }

    /// Allocation-light variant of [`drift`](Self::drift) for integrators.
    pub fn drift_into(&self, x: &Vector, out: &mut Vector) {
        if self.activation == Activation::Linear {
            out.gemv(1.0, &self.linear, x, 0.0);
            return;
        }
        let fx = self.activation.value(x);
        out.gemv(1.0, &self.connectivity, &fx, 0.0);
        for i in 0..x.len() {
            out[i] -= self.decay[i] * x[i];
        }
    }

    /// `DN(x) = −D + W·diag(f′(x))`.
    pub fn drift_jacobian(&self, x: &Vector) -> Matrix {
        if self.activation == Activation::Linear {
            return self.linear.clone();
        }
        let slope = self.activation.slope(x);
        let mut jac = self.connectivity.clone();
        for (j, s) in slope.iter().enumerate() {
            jac.column_mut(j).scale_mut(*s);
        }
        for i in 0..self.dim() {
            jac[(i, i)] -= self.decay[i];
        }
        jac
    }

    pub fn contraction_margins(&self) -> ContractionMargins {
        let w_norm = spectral_norm(&self.connectivity);
        let d_min = self.decay.min();
        let d_max = self.decay.max();
        let slope = self.activation.slope_bound();
        ContractionMargins {
            gamma: d_min - w_norm * slope,
            lambda: d_max + w_norm * slope,
            lambda1: w_norm * self.activation.curvature_bound(),
        }
    }

    pub fn to_file(&self) -> ModelFile {
        let rows = |m: &Matrix| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
        ModelFile {
            dim: self.dim(),
            k: self.inputs(),
            decay: self.decay.iter().copied().collect(),
            w: rows(&self.connectivity),
            b: rows(&self.input),
            activation: match &self.activation {
                Activation::Linear => ActivationSpec {
                    kind: ActivationKind::Linear,
                    alpha: None,
                },
                Activation::Tanh => ActivationSpec {
                    kind: ActivationKind::Tanh,
                    alpha: None,
                },
                Activation::Mindy { alpha } => ActivationSpec {
                    kind: ActivationKind::Mindy,
                    alpha: Some(alpha.clone()),
                },
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.into_model()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// On-disk model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub dim: usize,
    pub k: usize,
    pub decay: Vec<f64>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub activation: ActivationSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Linear,
    Tanh,
    Mindy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
}

fn nested_to_matrix(name: &str, rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<Matrix, ModelError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(invalid(format!("{name} must be a {nrows}x{ncols} nested array")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl ModelFile {
    pub fn into_model(self) -> Result<NetworkModel, ModelError> {
        let d = self.dim;
        if self.decay.len() != d {
            return Err(invalid(format!("decay must have {d} entries")));
        }
        let w = nested_to_matrix("W", &self.w, d, d)?;
        let b = nested_to_matrix("B", &self.b, d, self.k)?;
        let activation = match (self.activation.kind, self.activation.alpha) {
            (ActivationKind::Linear, None) => Activation::Linear,
            (ActivationKind::Tanh, None) => Activation::Tanh,
            (ActivationKind::Mindy, Some(alpha)) => Activation::Mindy { alpha },
            (ActivationKind::Mindy, None) => return Err(invalid("mindy activation requires alpha")),
            (_, Some(_)) => return Err(invalid("alpha is only valid for mindy activation")),
        };
        NetworkModel::new(Vector::from_vec(self.decay), w, b, activation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64, d: usize, activation: Activation) -> NetworkModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decay = Vector::from_fn(d, |_, _| rng.random_range(0.5..2.0));
        let w = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        NetworkModel::new(decay, w, Matrix::identity(d, d), activation).unwrap()
    }

    fn all_families(d: usize) -> Vec<Activation> {
        vec![
            Activation::Linear,
            Activation::Tanh,
            Activation::Mindy {
                alpha: (0..d).map(|i| 0.5 + 0.1 * i as f64).collect(),
            },
        ]
    }

    #[test]
    fn tanh_at_origin() {
        assert_eq!(Activation::Tanh.scalar(0, 0.0), (0.0, 1.0, 0.0));
    }

    #[test]
    fn mindy_vanishes_at_origin() {
        let act = Activation::Mindy { alpha: vec![1.0] };
        assert_eq!(act.scalar(0, 0.0).0, 0.0);
    }

    #[test]
    fn mindy_derivatives_match_finite_differences() {
        let act = Activation::Mindy { alpha: vec![0.5] };
        let h = 1e-6;
        let s = 0.3;
        let (_, df, d2f) = act.scalar(0, s);
        let fd1 = (act.scalar(0, s + h).0 - act.scalar(0, s - h).0) / (2.0 * h);
        let fd2 = (act.scalar(0, s + h).1 - act.scalar(0, s - h).1) / (2.0 * h);
        assert!((df - fd1).abs() <= 1e-6 * df.abs());
        assert!((d2f - fd2).abs() <= 1e-6 * d2f.abs());
    }

    #[test]
    fn drift_vanishes_at_origin() {
        for act in all_families(4) {
            let m = random_model(1, 4, act);
            assert_eq!(m.drift(&Vector::zeros(4)), Vector::zeros(4));
        }
    }

    #[test]
    fn linear_drift_is_linear_part() {
        let m = random_model(2, 5, Activation::Linear);
        let x = Vector::from_vec(vec![0.3, -1.0, 2.0, 0.1, -0.7]);
        assert_eq!(m.drift(&x) - m.linear_part() * &x, Vector::zeros(5));
        assert_eq!(m.drift_jacobian(&x), m.linear_part());
    }

    #[test]
    fn scalar_tanh_drift() {
        let m = NetworkModel::new(
            Vector::from_vec(vec![1.0]),
            Matrix::from_element(1, 1, 2.0),
            Matrix::identity(1, 1),
            Activation::Tanh,
        )
        .unwrap();
        // -0.5 + 2·tanh(0.5), tanh(0.5) to 20 digits: 0.46211715726000975850
        let expected = -0.5 + 2.0 * 0.462_117_157_260_009_8;
        assert!((m.drift(&Vector::from_vec(vec![0.5]))[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn tanh_jacobian_at_origin_is_linear_part() {
        let m = random_model(3, 4, Activation::Tanh);
        assert_eq!(m.drift_jacobian(&Vector::zeros(4)), m.linear_part());
    }

    #[test]
    fn jacobian_matches_finite_differences_for_every_family() {
        let d = 5;
        for (seed, act) in all_families(d).into_iter().enumerate() {
            let m = random_model(10 + seed as u64, d, act);
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
            let x = Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let jac = m.drift_jacobian(&x);
            let h = 1e-6;
            let mut fd = Matrix::zeros(d, d);
            for j in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                fd.set_column(j, &((m.drift(&xp) - m.drift(&xm)) / (2.0 * h)));
            }
            assert!((&jac - &fd).norm() <= 1e-6 * jac.norm());
        }
    }

    #[test]
    fn margins_of_trivial_models() {
        let m = NetworkModel::new(
            Vector::from_element(3, 1.0),
            Matrix::zeros(3, 3),
            Matrix::identity(3, 3),
            Activation::Linear,
        )
        .unwrap();
        let c = m.contraction_margins();
        assert_eq!((c.gamma, c.lambda, c.lambda1), (1.0, 1.0, 0.0));

        let w = Matrix::from_diagonal(&Vector::from_vec(vec![0.5, -0.2]));
        let m = NetworkModel::new(
            Vector::from_element(2, 2.0),
            w,
            Matrix::identity(2, 2),
            Activation::Linear,
        )
        .unwrap();
        let c = m.contraction_margins();
        assert!((c.gamma - 1.5).abs() < 1e-14 && (c.lambda - 2.5).abs() < 1e-14);
    }

    #[test]
    fn mindy_slope_bound_matches_dense_grid() {
        let act = Activation::Mindy { alpha: vec![0.5, 1.2] };
        let grid = (0..200_001)
            .map(|j| -10.0 + j as f64 * 1e-4)
            .flat_map(|s| [act.scalar(0, s).1, act.scalar(1, s).1])
            .fold(0.0, f64::max);
        assert!((act.slope_bound() - grid).abs() < 1e-9 * grid);
        assert!((act.slope_bound() - MINDY_SLOPE / 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tanh_curvature_bound_matches_dense_grid() {
        let m = random_model(4, 4, Activation::Tanh);
        // sup|tanh''| is attained at s = atanh(1/√3) with value 4/(3√3).
        let oracle = 4.0 / (3.0 * 3f64.sqrt());
        let c = m.contraction_margins();
        let expected = oracle * spectral_norm(m.connectivity());
        assert!((c.lambda1 - expected).abs() <= 1e-3 * expected);
    }

    #[test]
    fn rejects_invalid_models() {
        let id = Matrix::identity(2, 2);
        assert!(NetworkModel::new(
            Vector::from_vec(vec![1.0, 0.0]),
            id.clone(),
            id.clone(),
            Activation::Tanh
        )
        .is_err());
        assert!(NetworkModel::new(
            Vector::from_element(2, 1.0),
            id.clone(),
            Matrix::zeros(2, 0),
            Activation::Tanh
        )
        .is_err());
        assert!(NetworkModel::new(
            Vector::from_element(2, 1.0),
            id.clone(),
            id.clone(),
            Activation::Mindy { alpha: vec![1.0, -1.0] }
        )
        .is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let m = random_model(
            5,
            3,
            Activation::Mindy {
                alpha: vec![0.7, 1.0, 1.3],
            },
        );
        let back = NetworkModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert!(NetworkModel::from_json(
            r#"{"dim":1,"k":1,"decay":[1],"W":[[0]],"B":[[1]],"activation":{"kind":"tanh"},"extra":1}"#
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn drift_is_lipschitz_with_lambda(seed in 0u64..1000, xs in prop::collection::vec(-3.0f64..3.0, 8)) {
            let d = 4;
            for act in all_families(d) {
                let m = random_model(seed, d, act);
                let lambda = m.contraction_margins().lambda;
                let x = Vector::from_row_slice(&xs[..d]);
                let y = Vector::from_row_slice(&xs[d..]);
                let lhs = (m.drift(&x) - m.drift(&y)).norm();
                prop_assert!(lhs <= (lambda + 1e-9) * (x - y).norm());
            }
        }

        #[test]
        fn jacobian_norm_bounded_by_lambda(seed in 0u64..1000, xs in prop::collection::vec(-3.0f64..3.0, 4)) {
            let m = random_model(seed, 4, Activation::Tanh);
            let x = Vector::from_row_slice(&xs);
            prop_assert!(spectral_norm(&m.drift_jacobian(&x)) <= m.contraction_margins().lambda + 1e-12);
        }
    }
}
