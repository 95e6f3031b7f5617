//! Dense linear-algebra kernels used by the synthesis formulas.
//!
//! Everything here is a pure function of its inputs. Matrices are
//! [`nalgebra::DMatrix<f64>`]; the crate never takes the sparse path.

use nalgebra::{Complex, DMatrix, DVector, Schur};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Reciprocal condition estimates below this value make [`solve`] fail.
pub const SINGULARITY_THRESHOLD: f64 = 1e-12;

/// Relative residual above which [`pseudo_inverse_apply`] reports the
/// right-hand side as lying outside the image of the matrix.
pub const NOT_IN_IMAGE_TOL: f64 = 1e-6;

/// Relative size (against the largest R-diagonal entry) under which a
/// pivot of the QR factorization counts as zero.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("singular system: reciprocal condition estimate {rcond:.3e} is below {SINGULARITY_THRESHOLD:e}")]
    SingularSystem { rcond: f64 },
    #[error("rank deficient: R-diagonal entry {index} has relative size {relative:.3e}")]
    RankDeficient { index: usize, relative: f64 },
    #[error("eigenvalue iteration did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

fn ensure_square(a: &Matrix) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(())
}

fn ensure_finite(a: &Matrix) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

/// Maximum absolute column sum.
pub fn norm1(a: &Matrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest singular value.
pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().max()
}

// Degree-13 diagonal Padé coefficients and the 1-norm bounds below which the
// lower-degree approximants already reach double precision.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539_398_330_063_23e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068),
];
const THETA13: f64 = 5.371920351148152;

/// `e^{tA}` by scaling and squaring with a diagonal Padé approximant of
/// degree at most 13.
pub fn matexp(a: &Matrix, t: f64) -> Result<Matrix> {
    ensure_square(a)?;
    if !t.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    ensure_finite(a)?;
    let n = a.nrows();
    if t == 0.0 {
        return Ok(Matrix::identity(n, n));
    }
    let m = a * t;
    let norm = norm1(&m);
    if norm == 0.0 {
        return Ok(Matrix::identity(n, n));
    }

    for &(degree, theta) in &THETA {
        if norm <= theta {
            let coeffs: &[f64] = match degree {
                3 => &PADE3,
                5 => &PADE5,
                7 => &PADE7,
                _ => &PADE9,
            };
            return pade_low(&m, coeffs);
        }
    }

    let squarings = (norm / THETA13).log2().ceil().max(0.0) as i32;
    let scaled = &m * 2f64.powi(-squarings);
    let mut result = pade13(&scaled)?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    Ok(result)
}

fn pade_low(m: &Matrix, b: &[f64]) -> Result<Matrix> {
    let n = m.nrows();
    let id = Matrix::identity(n, n);
    let m2 = m * m;
    // Even powers up to degree-1.
    let mut powers = vec![id.clone(), m2.clone()];
    while powers.len() * 2 < b.len() {
        let next = powers.last().unwrap() * &m2;
        powers.push(next);
    }
    let mut u = Matrix::zeros(n, n);
    let mut v = Matrix::zeros(n, n);
    for (j, p) in powers.iter().enumerate() {
        u += p * b[2 * j + 1];
        v += p * b[2 * j];
    }
    let u = m * u;
    pade_quotient(&u, &v)
}

fn pade13(m: &Matrix) -> Result<Matrix> {
    let b = &PADE13;
    let n = m.nrows();
    let id = Matrix::identity(n, n);
    let m2 = m * m;
    let m4 = &m2 * &m2;
    let m6 = &m4 * &m2;
    let inner_u = &m6 * (&m6 * b[13] + &m4 * b[11] + &m2 * b[9]);
    let u = m * (inner_u + &m6 * b[7] + &m4 * b[5] + &m2 * b[3] + &id * b[1]);
    let inner_v = &m6 * (&m6 * b[12] + &m4 * b[10] + &m2 * b[8]);
    let v = inner_v + &m6 * b[6] + &m4 * b[4] + &m2 * b[2] + &id * b[0];
    pade_quotient(&u, &v)
}

fn pade_quotient(u: &Matrix, v: &Matrix) -> Result<Matrix> {
    let denom = v - u;
    let numer = v + u;
    denom
        .lu()
        .solve(&numer)
        .ok_or(LinalgError::SingularSystem { rcond: 0.0 })
}

/// Eigenvalues of a real square matrix, with algebraic multiplicity.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<Complex<f64>>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn max_real_part(&self) -> f64 {
        self.eigenvalues.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn product(&self) -> Complex<f64> {
        self.eigenvalues.iter().fold(Complex::new(1.0, 0.0), |acc, z| acc * z)
    }
}

const EIGEN_MAX_ITERATIONS: usize = 10_000;

pub fn eigenvalues(a: &Matrix) -> Result<Spectrum> {
    ensure_square(a)?;
    ensure_finite(a)?;
    let schur = Schur::try_new(a.clone(), f64::EPSILON, EIGEN_MAX_ITERATIONS).ok_or(LinalgError::NoConvergence {
        iterations: EIGEN_MAX_ITERATIONS,
    })?;
    Ok(Spectrum {
        eigenvalues: schur.complex_eigenvalues().iter().copied().collect(),
    })
}

/// Solution of a square system together with its conditioning.
#[derive(Debug, Clone)]
pub struct Solved {
    pub solution: Matrix,
    /// `1 / (max(‖A‖₁, 1) · ‖A⁻¹‖₁)`.
    pub rcond: f64,
}

/// Solves `A·X = Y` by LU with partial pivoting.
///
/// The reciprocal condition estimate is taken against unit scale: every
/// system this crate inverts is `e^{tU} − Id`, a Gramian or an input
/// matrix, all of which are O(1) perturbations of well-scaled matrices. A
/// matrix whose entries are pure cancellation noise (such as `e^{TA} − Id`
/// when `e^{TA} = Id`) is therefore reported as singular even though its
/// scale-free condition number may look harmless.
pub fn solve(a: &Matrix, y: &Matrix) -> Result<Solved> {
    ensure_square(a)?;
    if y.nrows() != a.nrows() {
        return Err(LinalgError::Dimension(format!(
            "right-hand side has {} rows, matrix has {}",
            y.nrows(),
            a.nrows()
        )));
    }
    ensure_finite(a)?;
    let lu = a.clone().lu();
    let inverse = lu.try_inverse().ok_or(LinalgError::SingularSystem { rcond: 0.0 })?;
    let inv_norm = norm1(&inverse);
    let rcond = if inv_norm.is_finite() {
        1.0 / (norm1(a).max(1.0) * inv_norm)
    } else {
        0.0
    };
    if rcond.is_nan() || rcond < SINGULARITY_THRESHOLD {
        return Err(LinalgError::SingularSystem { rcond });
    }
    let solution = lu.solve(y).ok_or(LinalgError::SingularSystem { rcond: 0.0 })?;
    Ok(Solved { solution, rcond })
}

/// Vector convenience wrapper over [`solve`].
pub fn solve_vector(a: &Matrix, y: &Vector) -> Result<(Vector, f64)> {
    let y = Matrix::from_column_slice(y.len(), 1, y.as_slice());
    let solved = solve(a, &y)?;
    Ok((solved.solution.column(0).into_owned(), solved.rcond))
}

/// Minimum-norm least-squares solution of `B·u = y`.
#[derive(Debug, Clone)]
pub struct LeastNorm {
    pub solution: Vector,
    /// `|B·u − y|`
    pub residual: f64,
    /// `|B·u − y| / |y|` (zero when `y = 0`).
    pub relative_residual: f64,
    pub not_in_image: bool,
}

/// `B†·y` through the singular value decomposition, discarding singular
/// values below `max(d, k)·ε·σ_max`.
pub fn pseudo_inverse_apply(b: &Matrix, y: &Vector) -> Result<LeastNorm> {
    if b.nrows() != y.len() {
        return Err(LinalgError::Dimension(format!(
            "input matrix has {} rows, vector has length {}",
            b.nrows(),
            y.len()
        )));
    }
    ensure_finite(b)?;
    let svd = b.clone().svd(true, true);
    let (u, v_t) = match (&svd.u, &svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => unreachable!("svd computed with both factors"),
    };
    let sigma_max = svd.singular_values.max();
    let cutoff = b.nrows().max(b.ncols()) as f64 * f64::EPSILON * sigma_max;
    let projected = u.transpose() * y;
    let mut scaled = Vector::zeros(projected.len());
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > cutoff {
            scaled[i] = projected[i] / s;
        }
    }
    let solution = v_t.transpose() * scaled;
    let residual = (b * &solution - y).norm();
    let y_norm = y.norm();
    let relative_residual = if y_norm > 0.0 { residual / y_norm } else { 0.0 };
    Ok(LeastNorm {
        solution,
        residual,
        relative_residual,
        not_in_image: relative_residual > NOT_IN_IMAGE_TOL,
    })
}

/// Orthonormal basis of a null space.
#[derive(Debug, Clone)]
pub struct KernelBasis {
    pub ambient_dim: usize,
    /// `ambient_dim × dim` matrix with orthonormal columns.
    pub basis: Matrix,
}

impl KernelBasis {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Basis of the whole space, for the case where nothing is constrained.
    pub fn full(ambient_dim: usize) -> Self {
        Self {
            ambient_dim,
            basis: Matrix::identity(ambient_dim, ambient_dim),
        }
    }

    /// Component of `v` orthogonal to the spanned subspace.
    pub fn reject(&self, v: &Vector) -> Vector {
        v - &self.basis * (self.basis.transpose() * v)
    }
}

/// Null space of a full-row-rank `r × d` matrix `M` (`r < d`).
///
/// Factors `Mᵀ = [Q₁ Q₂]·[R₁; 0]` with Householder reflections and returns
/// the trailing `d − r` columns `Q₂`, which span `ker M`.
pub fn kernel_basis(m: &Matrix) -> Result<KernelBasis> {
    ensure_finite(m)?;
    let (rows, d) = m.shape();
    if rows == 0 {
        return Ok(KernelBasis::full(d));
    }
    if rows >= d {
        return Err(LinalgError::Dimension(format!(
            "kernel basis needs fewer rows than columns, got {rows}x{d}"
        )));
    }
    let (q, r_diag) = householder_qr_full(&m.transpose());
    let max_pivot = r_diag.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for (index, pivot) in r_diag.iter().enumerate() {
        let relative = if max_pivot > 0.0 { pivot.abs() / max_pivot } else { 0.0 };
        if relative < RANK_TOL {
            return Err(LinalgError::RankDeficient { index, relative });
        }
    }
    Ok(KernelBasis {
        ambient_dim: d,
        basis: q.columns(rows, d - rows).into_owned(),
    })
}

/// Complete QR of a tall `n × p` matrix: the full `n × n` orthogonal factor
/// and the diagonal of `R`.
fn householder_qr_full(a: &Matrix) -> (Matrix, Vec<f64>) {
    let (n, p) = a.shape();
    let mut r = a.clone();
    let mut reflectors: Vec<Vector> = Vec::with_capacity(p);
    let mut diag = Vec::with_capacity(p);
    for j in 0..p {
        let x = r.view((j, j), (n - j, 1)).column(0).into_owned();
        let alpha = x.norm();
        let mut v = x.clone();
        // Reflect onto -sign(x₀)·|x|·e₁ to avoid cancellation.
        let beta = if x[0] >= 0.0 { -alpha } else { alpha };
        v[0] -= beta;
        let v_norm = v.norm();
        if v_norm > 0.0 {
            v /= v_norm;
            let mut block = r.view_mut((j, j), (n - j, p - j));
            let w = block.tr_mul(&v);
            block.ger(-2.0, &v, &w, 1.0);
        }
        diag.push(r[(j, j)]);
        reflectors.push(v);
    }
    let mut q = Matrix::identity(n, n);
    for (j, v) in reflectors.iter().enumerate().rev() {
        if v.norm() == 0.0 {
            continue;
        }
        let mut block = q.view_mut((j, 0), (n - j, n));
        let w = block.tr_mul(v);
        block.ger(-2.0, v, &w, 1.0);
    }
    (q, diag)
}
