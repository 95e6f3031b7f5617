//! Random model families, the two endpoint-error experiments and their CSV
//! output.
//!
//! Randomness is derived from counter-style seeds: every model, initial
//! state and noise draw gets its own ChaCha8 stream keyed by a hash of the
//! sweep seed and the trial coordinates. Results therefore do not depend on
//! the order in which the worker pool executes trials.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{flow_forward, simulate_controlled, ControlInput, FlowError, IntegratorConfig};
use crate::linalg::{eigenvalues, Matrix, Vector};
use crate::model::{Activation, ModelError, NetworkModel};
use crate::synthesis::{
    linearized_control, reachable_chart, reachable_control, synthesize, Method, SynthesisError, SynthesisRequest,
};

/// Exact CSV header.
pub const CSV_HEADER: [&str; 12] = [
    "family",
    "d",
    "k",
    "T",
    "tau",
    "method",
    "model_seed",
    "state_seed",
    "sigma2",
    "rel_endpoint_error",
    "status",
    "wall_time_ms",
];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid sweep configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: malformed row {row}: {message}")]
    Malformed { path: String, row: usize, message: String },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    StableLinear,
    UnstableLinear,
    SmallNormTanh,
    MonostableTanh,
    BistableTanh,
    MindyLike,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::StableLinear,
        Family::UnstableLinear,
        Family::SmallNormTanh,
        Family::MonostableTanh,
        Family::BistableTanh,
        Family::MindyLike,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::StableLinear => "stable_linear",
            Family::UnstableLinear => "unstable_linear",
            Family::SmallNormTanh => "small_norm_tanh",
            Family::MonostableTanh => "monostable_tanh",
            Family::BistableTanh => "bistable_tanh",
            Family::MindyLike => "mindy_like",
        }
    }

    pub fn is_linear(self) -> bool {
        matches!(self, Family::StableLinear | Family::UnstableLinear)
    }

    fn tag(self) -> u64 {
        Family::ALL.iter().position(|f| *f == self).unwrap_or(0) as u64 + 1
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown model family '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrialStatus {
    Ok,
    SingularSystem,
    Divergence,
    NotInImage,
    TargetOffChart,
}

impl TrialStatus {
    pub const ALL: [TrialStatus; 5] = [
        TrialStatus::Ok,
        TrialStatus::SingularSystem,
        TrialStatus::Divergence,
        TrialStatus::NotInImage,
        TrialStatus::TargetOffChart,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrialStatus::Ok => "Ok",
            TrialStatus::SingularSystem => "SingularSystem",
            TrialStatus::Divergence => "Divergence",
            TrialStatus::NotInImage => "NotInImage",
            TrialStatus::TargetOffChart => "TargetOffChart",
        }
    }

    /// Status recorded for a failed synthesis. Linear-algebra failures
    /// (rank loss, non-finite matrices) count as singular systems; every
    /// integrator failure counts as divergence.
    pub fn from_error(e: &SynthesisError) -> Self {
        match e {
            SynthesisError::TargetOffChart { .. } => TrialStatus::TargetOffChart,
            SynthesisError::Flow(_) => TrialStatus::Divergence,
            SynthesisError::SingularSystem { .. } | SynthesisError::Linalg(_) | SynthesisError::Invalid(_) => {
                TrialStatus::SingularSystem
            }
        }
    }
}

impl fmt::Display for TrialStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrialStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrialStatus::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown status '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub dim: usize,
    pub seed: u64,
}

const STREAM_MODEL: u64 = 1;
const STREAM_STATE: u64 = 2;
const STREAM_NOISE: u64 = 3;

const TAG_MODEL: u64 = 0x006d_6f64_656c;
const TAG_STATE: u64 = 0x0073_7461_7465;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a sequence of words into one 64-bit seed.
pub fn derive_seed(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, w| splitmix(acc ^ splitmix(*w)))
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of model `index` of a family at dimension `dim`.
pub fn model_seed(sweep_seed: u64, family: Family, dim: usize, index: usize) -> u64 {
    derive_seed(&[TAG_MODEL, sweep_seed, family.tag(), dim as u64, index as u64])
}

/// Seed of initial state `index` for a given model.
pub fn state_seed(sweep_seed: u64, model_seed: u64, index: usize) -> u64 {
    derive_seed(&[TAG_STATE, sweep_seed, model_seed, index as u64])
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive standard deviation");
    // Row-major fill so the draw order reads naturally.
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = normal.sample(rng);
        }
    }
    m
}

fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vector {
    gaussian_matrix(rng, n, 1, std).column(0).into_owned()
}

fn tanh_connectivity(rng: &mut ChaCha8Rng, d: usize, g: f64) -> Matrix {
    gaussian_matrix(rng, d, d, g / (d as f64).sqrt())
}

/// Builds a random network of the given family. Deterministic in `spec.seed`.
pub fn generate_model(spec: &ModelSpec) -> Result<NetworkModel, HarnessError> {
    let d = spec.dim;
    if d < 2 {
        return Err(HarnessError::Config(format!(
            "model dimension must be at least 2, got {d}"
        )));
    }
    let mut rng = stream(spec.seed, STREAM_MODEL);
    let ones = Vector::from_element(d, 1.0);
    let id = Matrix::identity(d, d);
    let model = match spec.family {
        Family::StableLinear | Family::UnstableLinear => {
            let lambda0 = if spec.family == Family::StableLinear { -0.1 } else { 0.1 };
            let mut attempt = 0;
            loop {
                let w = gaussian_matrix(&mut rng, d, d, 1.0 / (d as f64).sqrt());
                let lam = eigenvalues(&w)
                    .map_err(|e| HarnessError::Config(e.to_string()))?
                    .max_real_part();
                let decay = lam - lambda0;
                if decay > 1e-3 {
                    break NetworkModel::new(Vector::from_element(d, decay), w, id, Activation::Linear)?;
                }
                attempt += 1;
                if attempt >= 1000 {
                    return Err(HarnessError::Config(format!(
                        "could not draw a {} model with positive decay",
                        spec.family
                    )));
                }
            }
        }
        Family::SmallNormTanh => NetworkModel::new(ones, tanh_connectivity(&mut rng, d, 0.5), id, Activation::Tanh)?,
        Family::MonostableTanh | Family::BistableTanh => {
            let j = tanh_connectivity(&mut rng, d, 0.9);
            let m = gaussian_vector(&mut rng, d, 1.0);
            let n = if spec.family == Family::MonostableTanh {
                gaussian_vector(&mut rng, d, 1.0 / d as f64)
            } else {
                &m * (1.1 / d as f64)
            };
            NetworkModel::new(ones, j + &m * n.transpose(), id, Activation::Tanh)?
        }
        Family::MindyLike => {
            let w = tanh_connectivity(&mut rng, d, 0.5);
            let unif = Uniform::new_inclusive(0.5, 1.5).expect("valid range");
            let alpha = (0..d).map(|_| unif.sample(&mut rng)).collect();
            NetworkModel::new(ones, w, id, Activation::Mindy { alpha })?
        }
    };
    Ok(model)
}

/// `x⁰ ~ N(0, Id)` from the state stream.
pub fn initial_state(state_seed: u64, d: usize) -> Vector {
    let mut rng = stream(state_seed, STREAM_STATE);
    Vector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Standard normal draws from the noise stream of a state seed. Scaling by
/// `σ` gives the deviation, so the same state seed pairs trials across `σ²`
/// and `T`.
pub fn noise(state_seed: u64, n: usize) -> Vector {
    let mut rng = stream(state_seed, STREAM_NOISE);
    Vector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// `(x⁰, x¹)` with `x⁰ ~ N(0, Id)` and `x¹ = φ_T(x⁰) + ε`, `ε ~ N(0, σ²Id)`.
pub fn sample_trial(
    model: &NetworkModel,
    state_seed: u64,
    horizon: f64,
    sigma2: f64,
    cfg: &IntegratorConfig,
) -> Result<(Vector, Vector), HarnessError> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(HarnessError::Config(format!("sigma2 must be >= 0, got {sigma2}")));
    }
    let x0 = initial_state(state_seed, model.dim());
    let free = flow_forward(model, &x0, horizon, cfg)?.terminal_state;
    let x1 = free + noise(state_seed, model.dim()) * sigma2.sqrt();
    Ok((x0, x1))
}

fn default_rel_tol() -> f64 {
    IntegratorConfig::default().rel_tol
}

fn default_abs_tol() -> f64 {
    IntegratorConfig::default().abs_tol
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub families: Vec<Family>,
    pub dims: Vec<usize>,
    pub horizons: Vec<f64>,
    pub methods: Vec<Method>,
    /// `σ²` of the target deviation (experiment 1) or of `ξ` (experiment 2).
    pub deviation_sigma2: Vec<f64>,
    pub n_models: usize,
    pub n_states: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_values: Option<Vec<usize>>,
    pub seed: u64,
    /// Wall-clock times make CSVs non-reproducible, so they are opt-in.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    #[serde(default = "default_abs_tol")]
    pub abs_tol: f64,
}

impl SweepConfig {
    pub fn desk_experiment1() -> Self {
        Self {
            families: Family::ALL.to_vec(),
            dims: vec![16],
            horizons: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
            methods: Method::ALL.to_vec(),
            deviation_sigma2: vec![0.1, 0.5],
            n_models: 3,
            n_states: 10,
            tau: None,
            k_values: None,
            seed: 20_251_016,
            record_wall_time: false,
            rel_tol: default_rel_tol(),
            abs_tol: default_abs_tol(),
        }
    }

    pub fn desk_experiment2() -> Self {
        Self {
            families: vec![Family::SmallNormTanh],
            dims: vec![32],
            horizons: vec![0.25, 0.5, 1.0],
            methods: vec![Method::ForwardNominal, Method::LinearizedAtX0],
            deviation_sigma2: vec![0.01],
            k_values: Some(vec![8, 16, 31, 32]),
            ..Self::desk_experiment1()
        }
    }

    pub fn paper_experiment1() -> Self {
        Self {
            dims: vec![100],
            horizons: (-2..=6).map(|p| 2f64.powi(p)).collect(),
            n_models: 5,
            n_states: 40,
            ..Self::desk_experiment1()
        }
    }

    pub fn paper_experiment2() -> Self {
        Self {
            dims: vec![128],
            horizons: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            k_values: Some(vec![1, 64, 96, 120, 126, 128]),
            n_models: 5,
            n_states: 20,
            ..Self::desk_experiment2()
        }
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
            ..IntegratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.families.is_empty()
            || self.dims.is_empty()
            || self.horizons.is_empty()
            || self.methods.is_empty()
            || self.deviation_sigma2.is_empty()
        {
            return bad("families, dims, horizons, methods and deviation_sigma2 must be non-empty".into());
        }
        if self.n_models == 0 || self.n_states == 0 {
            return bad("n_models and n_states must be positive".into());
        }
        if let Some(d) = self.dims.iter().find(|d| **d < 2) {
            return bad(format!("dimension {d} is below 2"));
        }
        if let Some(t) = self.horizons.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return bad(format!("horizon {t} is not positive"));
        }
        if let Some(s) = self.deviation_sigma2.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return bad(format!("deviation variance {s} is not positive"));
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return bad(format!("tau {tau} is not positive"));
            }
        }
        if let Some(ks) = &self.k_values {
            if ks.is_empty() {
                return bad("k_values must be non-empty when present".into());
            }
        }
        self.integrator()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    fn validate_experiment2(&self) -> Result<&[usize], HarnessError> {
        self.validate()?;
        let ks = self
            .k_values
            .as_deref()
            .ok_or_else(|| HarnessError::Config("experiment 2 needs k_values".into()))?;
        if self.families != [Family::SmallNormTanh] {
            return Err(HarnessError::Config("experiment 2 runs on small_norm_tanh only".into()));
        }
        if let Some(m) = self
            .methods
            .iter()
            .find(|m| !matches!(m, Method::ForwardNominal | Method::LinearizedAtX0))
        {
            return Err(HarnessError::Config(format!(
                "experiment 2 supports forward and linearized, not {m}"
            )));
        }
        for &d in &self.dims {
            if let Some(k) = ks.iter().find(|k| **k == 0 || **k > d) {
                return Err(HarnessError::Config(format!("k = {k} is outside 1..={d}")));
            }
        }
        Ok(ks)
    }
}

/// Both experiments, as read from a sweep configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment1: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment2: Option<SweepConfig>,
}

impl SweepFile {
    pub fn desk() -> Self {
        Self {
            experiment1: Some(SweepConfig::desk_experiment1()),
            experiment2: Some(SweepConfig::desk_experiment2()),
        }
    }

    pub fn paper() -> Self {
        Self {
            experiment1: Some(SweepConfig::paper_experiment1()),
            experiment2: Some(SweepConfig::paper_experiment2()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let file: SweepFile = serde_json::from_str(&text)?;
        if file.experiment1.is_none() && file.experiment2.is_none() {
            return Err(HarnessError::Config("sweep file defines no experiment".into()));
        }
        Ok(file)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub family: Family,
    pub d: usize,
    pub k: usize,
    pub horizon: f64,
    pub tau: Option<f64>,
    pub method: Method,
    pub model_seed: u64,
    pub state_seed: u64,
    pub sigma2: f64,
    /// `|x(T) − x¹| / |x¹ − x⁰|`; NaN when no closed-loop endpoint exists.
    pub rel_endpoint_error: f64,
    pub status: TrialStatus,
    pub wall_time_ms: f64,
}

impl TrialRecord {
    fn sort_key_cmp(&self, other: &Self) -> Ordering {
        self.family
            .as_str()
            .cmp(other.family.as_str())
            .then(self.d.cmp(&other.d))
            .then(self.k.cmp(&other.k))
            .then(self.horizon.total_cmp(&other.horizon))
            .then(self.method.as_str().cmp(other.method.as_str()))
            .then(self.model_seed.cmp(&other.model_seed))
            .then(self.state_seed.cmp(&other.state_seed))
            .then(self.sigma2.total_cmp(&other.sigma2))
    }
}

/// Sorts records into CSV order.
pub fn sort_records(records: &mut [TrialRecord]) {
    records.sort_by(|a, b| a.sort_key_cmp(b));
}

fn relative_error(reached: &Vector, x0: &Vector, x1: &Vector) -> f64 {
    (reached - x1).norm() / (x1 - x0).norm()
}

struct Timer {
    start: Option<Instant>,
}

impl Timer {
    fn start(enabled: bool) -> Self {
        Self {
            start: enabled.then(Instant::now),
        }
    }

    fn elapsed_ms(&self) -> f64 {
        self.start.map_or(0.0, |s| s.elapsed().as_secs_f64() * 1e3)
    }
}

/// Simulates the closed loop and classifies the outcome.
fn closed_loop(
    model: &NetworkModel,
    x0: &Vector,
    x1: &Vector,
    input: &ControlInput,
    horizon: f64,
    not_in_image: bool,
    cfg: &IntegratorConfig,
) -> (f64, TrialStatus) {
    match simulate_controlled(model, x0, input, horizon, cfg) {
        Ok(r) => {
            let err = relative_error(&r.terminal_state, x0, x1);
            let status = if not_in_image {
                TrialStatus::NotInImage
            } else {
                TrialStatus::Ok
            };
            (err, status)
        }
        Err(_) => (f64::NAN, TrialStatus::Divergence),
    }
}

fn methods_for(family: Family, methods: &[Method]) -> Vec<Method> {
    methods
        .iter()
        .copied()
        .filter(|m| family.is_linear() || *m != Method::LinearExact)
        .collect()
}

struct ModelCell {
    family: Family,
    d: usize,
    seed: u64,
    model: NetworkModel,
}

fn build_models(cfg: &SweepConfig) -> Result<Vec<ModelCell>, HarnessError> {
    let specs: Vec<(Family, usize, u64)> = cfg
        .families
        .iter()
        .flat_map(|&f| {
            cfg.dims
                .iter()
                .flat_map(move |&d| (0..cfg.n_models).map(move |i| (f, d, model_seed(cfg.seed, f, d, i))))
        })
        .collect();
    specs
        .into_par_iter()
        .map(|(family, d, seed)| {
            let model = generate_model(&ModelSpec { family, dim: d, seed })?;
            Ok(ModelCell { family, d, seed, model })
        })
        .collect()
}

/// Endpoint error versus horizon for every family, method and deviation
/// size, with `B = Id`.
pub fn run_experiment_1(cfg: &SweepConfig) -> Result<Vec<TrialRecord>, HarnessError> {
    cfg.validate()?;
    let integrator = cfg.integrator();
    let models = build_models(cfg)?;
    let mut items = Vec::new();
    for mi in 0..models.len() {
        for s in 0..cfg.n_states {
            for &t in &cfg.horizons {
                for &sigma2 in &cfg.deviation_sigma2 {
                    items.push((mi, s, t, sigma2));
                }
            }
        }
    }
    let mut records: Vec<TrialRecord> = items
        .into_par_iter()
        .flat_map_iter(|(mi, s, t, sigma2)| {
            let cell = &models[mi];
            let seed = state_seed(cfg.seed, cell.seed, s);
            experiment1_cell(cfg, &integrator, cell, seed, t, sigma2)
        })
        .collect();
    sort_records(&mut records);
    Ok(records)
}

fn experiment1_cell(
    cfg: &SweepConfig,
    integrator: &IntegratorConfig,
    cell: &ModelCell,
    seed: u64,
    horizon: f64,
    sigma2: f64,
) -> Vec<TrialRecord> {
    let methods = methods_for(cell.family, &cfg.methods);
    let base = |method: Method, tau: Option<f64>| TrialRecord {
        family: cell.family,
        d: cell.d,
        k: cell.model.inputs(),
        horizon,
        tau,
        method,
        model_seed: cell.seed,
        state_seed: seed,
        sigma2,
        rel_endpoint_error: f64::NAN,
        status: TrialStatus::Divergence,
        wall_time_ms: 0.0,
    };
    let tau_for = |m: Method| match m {
        Method::LinearizedAtX0 => None,
        _ => cfg.tau.map(|tau| tau.min(horizon)),
    };
    let (x0, x1) = match sample_trial(&cell.model, seed, horizon, sigma2, integrator) {
        Ok(pair) => pair,
        Err(_) => return methods.iter().map(|&m| base(m, tau_for(m))).collect(),
    };
    methods
        .iter()
        .map(|&method| {
            let tau = tau_for(method);
            let timer = Timer::start(cfg.record_wall_time);
            let mut req = SynthesisRequest::new(&cell.model, x0.clone(), x1.clone(), horizon, method);
            req.tau = tau;
            let (err, status) = match synthesize(&req, integrator) {
                Ok(r) => closed_loop(&cell.model, &x0, &x1, &r.input, horizon, r.not_in_image, integrator),
                Err(e) => (f64::NAN, TrialStatus::from_error(&e)),
            };
            TrialRecord {
                rel_endpoint_error: err,
                status,
                wall_time_ms: timer.elapsed_ms(),
                ..base(method, tau)
            }
        })
        .collect()
}

/// Endpoint error versus actuation rank for small-norm tanh networks with
/// canonical input matrices and on-chart targets.
///
/// The nonlinear method uses the chart control `u = V_T(x¹ − φ_T(x⁰))`,
/// which for `k = d` is the forward synthesis itself. The linearized
/// baseline computes the fully actuated input and keeps its first `k`
/// coordinates.
pub fn run_experiment_2(cfg: &SweepConfig) -> Result<Vec<TrialRecord>, HarnessError> {
    let ks = cfg.validate_experiment2()?.to_vec();
    let integrator = cfg.integrator();
    let models = build_models(cfg)?;
    let mut items = Vec::new();
    for mi in 0..models.len() {
        for s in 0..cfg.n_states {
            for &t in &cfg.horizons {
                for &k in &ks {
                    for &sigma2 in &cfg.deviation_sigma2 {
                        items.push((mi, s, t, k, sigma2));
                    }
                }
            }
        }
    }
    let mut records: Vec<TrialRecord> = items
        .into_par_iter()
        .flat_map_iter(|(mi, s, t, k, sigma2)| {
            let cell = &models[mi];
            let seed = state_seed(cfg.seed, cell.seed, s);
            experiment2_cell(cfg, &integrator, cell, seed, t, k, sigma2)
        })
        .collect();
    sort_records(&mut records);
    Ok(records)
}

fn experiment2_cell(
    cfg: &SweepConfig,
    integrator: &IntegratorConfig,
    cell: &ModelCell,
    seed: u64,
    horizon: f64,
    k: usize,
    sigma2: f64,
) -> Vec<TrialRecord> {
    let record = |method: Method, err: f64, status: TrialStatus, ms: f64| TrialRecord {
        family: cell.family,
        d: cell.d,
        k,
        horizon,
        tau: None,
        method,
        model_seed: cell.seed,
        state_seed: seed,
        sigma2,
        rel_endpoint_error: err,
        status,
        wall_time_ms: ms,
    };
    let actuated = match cell.model.with_canonical_inputs(k) {
        Ok(m) => m,
        Err(_) => {
            return cfg
                .methods
                .iter()
                .map(|&m| record(m, f64::NAN, TrialStatus::SingularSystem, 0.0))
                .collect()
        }
    };
    let x0 = initial_state(seed, cell.d);
    let timer = Timer::start(cfg.record_wall_time);
    let chart = match reachable_chart(&actuated, &x0, horizon, integrator) {
        Ok(c) => c,
        Err(e) => {
            let status = TrialStatus::from_error(&e);
            return cfg.methods.iter().map(|&m| record(m, f64::NAN, status, 0.0)).collect();
        }
    };
    let chart_ms = timer.elapsed_ms();
    let xi = noise(seed, k) * sigma2.sqrt();
    let x1 = chart.target(&xi);
    cfg.methods
        .iter()
        .map(|&method| {
            let timer = Timer::start(cfg.record_wall_time);
            let control = match method {
                Method::LinearizedAtX0 => {
                    linearized_control(&cell.model, &x0, &x1, horizon).map(|(u, _)| u.rows(0, k).into_owned())
                }
                _ => reachable_control(&chart, &x1),
            };
            let (err, status) = match control {
                Ok(u) => closed_loop(
                    &actuated,
                    &x0,
                    &x1,
                    &ControlInput::Constant(u),
                    horizon,
                    false,
                    integrator,
                ),
                Err(e) => (f64::NAN, TrialStatus::from_error(&e)),
            };
            let extra = if method == Method::LinearizedAtX0 {
                0.0
            } else {
                chart_ms
            };
            record(method, err, status, timer.elapsed_ms() + extra)
        })
        .collect()
}

/// Runs `f` on a dedicated pool of `threads` workers (`None`: rayon default).
pub fn with_threads<R, F>(threads: Option<usize>, f: F) -> Result<R, HarnessError>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| HarnessError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn record_fields(r: &TrialRecord) -> [String; 12] {
    [
        r.family.as_str().to_string(),
        r.d.to_string(),
        r.k.to_string(),
        format_float(r.horizon),
        r.tau.map(format_float).unwrap_or_default(),
        r.method.as_str().to_string(),
        r.model_seed.to_string(),
        r.state_seed.to_string(),
        format_float(r.sigma2),
        format_float(r.rel_endpoint_error),
        r.status.as_str().to_string(),
        format_float(r.wall_time_ms),
    ]
}

/// Writes records (sorted into CSV order) with the fixed header.
pub fn write_csv(records: &[TrialRecord], path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    let csv_err = |source| HarnessError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in &sorted {
        w.write_record(record_fields(r)).map_err(csv_err)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a CSV written by [`write_csv`], rejecting any malformed row.
pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>, HarnessError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let csv_err = |source| HarnessError::Csv {
        path: name.clone(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(HarnessError::Malformed {
            path: name.clone(),
            row: 0,
            message: "unexpected header".into(),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let bad = |message: String| HarnessError::Malformed {
            path: name.clone(),
            row: i + 1,
            message,
        };
        let f = |j: usize| -> Result<f64, HarnessError> {
            row[j]
                .parse::<f64>()
                .map_err(|e| bad(format!("{}: {e}", CSV_HEADER[j])))
        };
        let u = |j: usize| -> Result<u64, HarnessError> {
            row[j]
                .parse::<u64>()
                .map_err(|e| bad(format!("{}: {e}", CSV_HEADER[j])))
        };
        out.push(TrialRecord {
            family: row[0].parse().map_err(bad)?,
            d: u(1)? as usize,
            k: u(2)? as usize,
            horizon: f(3)?,
            tau: if row[4].is_empty() { None } else { Some(f(4)?) },
            method: row[5].parse().map_err(bad)?,
            model_seed: u(6)?,
            state_seed: u(7)?,
            sigma2: f(8)?,
            rel_endpoint_error: f(9)?,
            status: row[10].parse().map_err(bad)?,
            wall_time_ms: f(11)?,
        });
    }
    Ok(out)
}

/// Median Ok-trial error of one (family, k, T, σ², method) group.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub family: Family,
    pub k: usize,
    pub horizon: f64,
    pub sigma2: f64,
    pub method: Method,
    pub n_ok: usize,
    pub n_total: usize,
    pub median_error: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Groups records and reports the median error of successful trials.
pub fn summarize(records: &[TrialRecord]) -> Vec<SummaryRow> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| {
        a.family
            .as_str()
            .cmp(b.family.as_str())
            .then(a.k.cmp(&b.k))
            .then(a.horizon.total_cmp(&b.horizon))
            .then(a.sigma2.total_cmp(&b.sigma2))
            .then(a.method.as_str().cmp(b.method.as_str()))
    });
    let same = |a: &TrialRecord, b: &TrialRecord| {
        a.family == b.family && a.k == b.k && a.horizon == b.horizon && a.sigma2 == b.sigma2 && a.method == b.method
    };
    sorted
        .chunk_by(same)
        .map(|group| {
            let mut ok: Vec<f64> = group
                .iter()
                .filter(|r| r.status == TrialStatus::Ok)
                .map(|r| r.rel_endpoint_error)
                .collect();
            SummaryRow {
                family: group[0].family,
                k: group[0].k,
                horizon: group[0].horizon,
                sigma2: group[0].sigma2,
                method: group[0].method,
                n_ok: ok.len(),
                n_total: group.len(),
                median_error: median(&mut ok),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_norm;

    #[test]
    fn stable_linear_spectrum_is_pinned() {
        for (family, target) in [(Family::StableLinear, -0.1), (Family::UnstableLinear, 0.1)] {
            let m = generate_model(&ModelSpec {
                family,
                dim: 100,
                seed: 7,
            })
            .unwrap();
            let top = eigenvalues(&m.linear_part()).unwrap().max_real_part();
            assert!((top - target).abs() < 1e-8, "{family}: {top}");
            assert!(m.has_identity_input());
        }
    }

    #[test]
    fn small_norm_connectivity_scale() {
        let a = generate_model(&ModelSpec {
            family: Family::SmallNormTanh,
            dim: 128,
            seed: 3,
        })
        .unwrap();
        let b = generate_model(&ModelSpec {
            family: Family::SmallNormTanh,
            dim: 128,
            seed: 3,
        })
        .unwrap();
        assert_eq!(a.connectivity(), b.connectivity());
        assert!(spectral_norm(a.connectivity()) < 1.2);
        // Entry variance g²/d.
        let var = a.connectivity().norm_squared() / (128.0 * 128.0);
        assert!((var - 0.25 / 128.0).abs() < 0.1 * 0.25 / 128.0);
    }

    #[test]
    fn bistable_low_rank_is_aligned() {
        let d = 20;
        let m = generate_model(&ModelSpec {
            family: Family::BistableTanh,
            dim: d,
            seed: 5,
        })
        .unwrap();
        let mono = generate_model(&ModelSpec {
            family: Family::MonostableTanh,
            dim: d,
            seed: 5,
        })
        .unwrap();
        // Same J and m: their difference is m(n_bi − n_mono)ᵀ, a rank-one matrix.
        let diff = m.connectivity() - mono.connectivity();
        let sv = diff.singular_values();
        assert!(sv[1] < 1e-12 * sv[0]);
        // Regenerate the low-rank part to check nᵀm > 0.
        let mut rng = stream(5, STREAM_MODEL);
        let _j = tanh_connectivity(&mut rng, d, 0.9);
        let mv = gaussian_vector(&mut rng, d, 1.0);
        let n = &mv * (1.1 / d as f64);
        assert!((n.dot(&mv) - 1.1 / d as f64 * mv.norm_squared()).abs() < 1e-12);
        assert!(n.dot(&mv) > 0.0);
    }

    #[test]
    fn mindy_like_alpha_range() {
        let m = generate_model(&ModelSpec {
            family: Family::MindyLike,
            dim: 50,
            seed: 9,
        })
        .unwrap();
        match m.activation() {
            Activation::Mindy { alpha } => assert!(alpha.iter().all(|a| (0.5..=1.5).contains(a))),
            other => panic!("unexpected activation {}", other.name()),
        }
    }

    #[test]
    fn trial_sampling_is_deterministic_and_scaled() {
        let cfg = IntegratorConfig::default();
        let m = generate_model(&ModelSpec {
            family: Family::SmallNormTanh,
            dim: 100,
            seed: 1,
        })
        .unwrap();
        let a = sample_trial(&m, 42, 1.0, 0.5, &cfg).unwrap();
        let b = sample_trial(&m, 42, 1.0, 0.5, &cfg).unwrap();
        assert_eq!(a, b);
        let free = flow_forward(&m, &a.0, 1.0, &cfg).unwrap().terminal_state;
        let eps2 = (&a.1 - free).norm_squared();
        // |ε|² ~ σ²χ²_d: mean 50, standard deviation σ²√(2d) ≈ 7.07.
        assert!((eps2 - 50.0).abs() < 3.0 * 0.5 * (200f64).sqrt(), "{eps2}");

        let (x0, x1) = sample_trial(&m, 42, 1.0, 0.0, &cfg).unwrap();
        assert_eq!(x1, flow_forward(&m, &x0, 1.0, &cfg).unwrap().terminal_state);
    }

    #[test]
    fn seeds_depend_on_every_coordinate() {
        let base = model_seed(1, Family::SmallNormTanh, 16, 0);
        assert_ne!(base, model_seed(2, Family::SmallNormTanh, 16, 0));
        assert_ne!(base, model_seed(1, Family::MindyLike, 16, 0));
        assert_ne!(base, model_seed(1, Family::SmallNormTanh, 17, 0));
        assert_ne!(base, model_seed(1, Family::SmallNormTanh, 16, 1));
        assert_ne!(state_seed(1, base, 0), state_seed(1, base, 1));
    }

    fn record(family: Family, t: f64, method: Method, err: f64) -> TrialRecord {
        TrialRecord {
            family,
            d: 4,
            k: 4,
            horizon: t,
            tau: None,
            method,
            model_seed: 1,
            state_seed: 2,
            sigma2: 0.1,
            rel_endpoint_error: err,
            status: TrialStatus::Ok,
            wall_time_ms: 0.0,
        }
    }

    #[test]
    fn csv_round_trip_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_csv(&[], &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            format!("{}\n", CSV_HEADER.join(","))
        );

        let mut a = record(Family::SmallNormTanh, 0.5, Method::ForwardNominal, 0.1 + 0.2);
        a.tau = Some(0.25);
        a.state_seed = u64::MAX;
        let mut b = record(Family::BistableTanh, 2.0, Method::BackwardNominal, f64::NAN);
        b.status = TrialStatus::Divergence;
        let c = record(Family::BistableTanh, 0.25, Method::LinearizedAtX0, 1e-300);
        write_csv(&[a.clone(), b.clone(), c.clone()], &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0], c);
        assert!(back[1].rel_endpoint_error.is_nan() && back[1].status == TrialStatus::Divergence);
        assert_eq!(back[2], a);
    }

    #[test]
    fn config_validation() {
        assert!(SweepConfig::desk_experiment1().validate().is_ok());
        assert!(SweepConfig::desk_experiment2().validate_experiment2().is_ok());
        assert!(SweepConfig::paper_experiment2().validate_experiment2().is_ok());
        let mut bad = SweepConfig::desk_experiment1();
        bad.horizons = vec![1.0, -1.0];
        assert!(bad.validate().is_err());
        let mut bad = SweepConfig::desk_experiment2();
        bad.k_values = Some(vec![33]);
        assert!(bad.validate_experiment2().is_err());
        let text = r#"{"experiment1": {"families": ["stable_linear"], "dims": [4], "horizons": [1.0],
            "methods": ["linear"], "deviation_sigma2": [0.1], "n_models": 1, "n_states": 1, "seed": 3,
            "bogus": 1}}"#;
        assert!(serde_json::from_str::<SweepFile>(text).is_err());
        let json = serde_json::to_string(&SweepFile::desk()).unwrap();
        assert_eq!(serde_json::from_str::<SweepFile>(&json).unwrap(), SweepFile::desk());
    }

    #[test]
    fn summary_medians() {
        let rs = vec![
            record(Family::StableLinear, 1.0, Method::LinearExact, 3.0),
            record(Family::StableLinear, 1.0, Method::LinearExact, 1.0),
            record(Family::StableLinear, 1.0, Method::LinearExact, 2.0),
            TrialRecord {
                status: TrialStatus::SingularSystem,
                ..record(Family::StableLinear, 1.0, Method::LinearExact, f64::NAN)
            },
            record(Family::StableLinear, 2.0, Method::LinearExact, 5.0),
        ];
        let s = summarize(&rs);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].n_ok, s[0].n_total, s[0].median_error), (3, 4, 2.0));
        assert_eq!(s[1].median_error, 5.0);
    }

    #[test]
    fn tiny_sweeps_cover_every_trial() {
        let cfg = SweepConfig {
            dims: vec![4],
            horizons: vec![0.5, 1.0],
            n_models: 1,
            n_states: 2,
            ..SweepConfig::desk_experiment1()
        };
        let rs = run_experiment_1(&cfg).unwrap();
        // 2 linear families × 4 methods + 4 nonlinear × 3, per (state, T, σ²).
        assert_eq!(rs.len(), (2 * 4 + 4 * 3) * 2 * 2 * 2);
        for r in rs.iter().filter(|r| r.method == Method::LinearExact) {
            assert_eq!(r.status, TrialStatus::Ok);
            assert!(r.rel_endpoint_error < 1e-6);
        }
        let cfg2 = SweepConfig {
            dims: vec![6],
            horizons: vec![0.25],
            k_values: Some(vec![2, 6]),
            n_models: 1,
            n_states: 2,
            ..SweepConfig::desk_experiment2()
        };
        let rs = run_experiment_2(&cfg2).unwrap();
        assert_eq!(rs.len(), 2 * 2 * 2);
        assert!(rs.iter().all(|r| r.status == TrialStatus::Ok));
    }
}
