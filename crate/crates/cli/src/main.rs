use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rnn_constctl::flow::{simulate_controlled, ControlInput, FlowError, IntegratorConfig, StepSchedule};
use rnn_constctl::harness::{self, HarnessError, SweepFile, TrialRecord};
use rnn_constctl::linalg::{Matrix, Vector};
use rnn_constctl::model::{ModelError, NetworkModel};
use rnn_constctl::synthesis::{
    default_spectral_tol, reachable_chart, reachable_control, spectral_condition, synthesize, Method, SynthesisError,
    SynthesisRequest,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

mod vectors;

use vectors::VectorArg;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Infeasible(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Infeasible(_) => 4,
        }
    }
}

impl From<SynthesisError> for CliError {
    fn from(e: SynthesisError) -> Self {
        match e {
            SynthesisError::Invalid(_) | SynthesisError::Flow(FlowError::Invalid(_)) => CliError::Usage(e.to_string()),
            SynthesisError::TargetOffChart { .. } => CliError::Infeasible(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Invalid(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "rnn-constctl",
    version,
    about = "Constant-input control synthesis for recurrent networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a constant (or late-window step) input steering x0 to x1.
    Synthesize(SynthesizeArgs),
    /// Simulate the controlled network and report x(T).
    Simulate(SimulateArgs),
    /// Build the reachable-set chart for B = [e_1 ... e_k] and optionally sample targets.
    Reachable(ReachableArgs),
    /// Check the spectral invertibility condition for horizon T.
    CheckSpectral(CheckSpectralArgs),
    /// Run the endpoint-error experiments and write CSVs.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct Tolerances {
    /// Relative integrator tolerance.
    #[arg(long, default_value_t = IntegratorConfig::default().rel_tol)]
    rtol: f64,
    /// Absolute integrator tolerance.
    #[arg(long, default_value_t = IntegratorConfig::default().abs_tol)]
    atol: f64,
}

impl Tolerances {
    fn config(&self) -> Result<IntegratorConfig, CliError> {
        let cfg = IntegratorConfig {
            rel_tol: self.rtol,
            abs_tol: self.atol,
            ..IntegratorConfig::default()
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Model document (JSON).
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    x0: X0Arg,
    #[command(flatten)]
    x1: X1Arg,
    /// Horizon T.
    #[arg(long = "T", visible_alias = "horizon")]
    horizon: f64,
    /// linear, forward, backward or linearized.
    #[arg(long)]
    method: Method,
    /// Active window length of a step input applied on [T - tau, T].
    #[arg(long)]
    tau: Option<f64>,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tol: Tolerances,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    x0: X0Arg,
    #[arg(long = "T", visible_alias = "horizon")]
    horizon: f64,
    /// Constant input, comma separated (default: zero).
    #[arg(long, conflicts_with_all = ["schedule", "result"])]
    u: Option<String>,
    /// Step schedule document with `horizon`, `switch_time` and `u`.
    #[arg(long, conflicts_with = "result")]
    schedule: Option<PathBuf>,
    /// Result document written by `synthesize`; its input is replayed.
    #[arg(long)]
    result: Option<PathBuf>,
    /// Optional target; adds rel_endpoint_error to the output.
    #[arg(long)]
    x1: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tol: Tolerances,
}

#[derive(Args)]
struct ReachableArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    x0: X0Arg,
    #[arg(long = "T", visible_alias = "horizon")]
    horizon: f64,
    /// Number of actuated coordinates; B becomes [e_1 ... e_k].
    #[arg(long)]
    k: usize,
    /// Number of on-chart targets to sample.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Variance of the chart coordinates of sampled targets.
    #[arg(long, default_value_t = 0.01)]
    sigma2: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Chart document path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-sample CSV path.
    #[arg(long)]
    samples_csv: Option<PathBuf>,
    #[command(flatten)]
    tol: Tolerances,
}

#[derive(Args)]
struct CheckSpectralArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "T", visible_alias = "horizon")]
    horizon: f64,
    /// Check DN at this point instead of A = -D + W.
    #[arg(long, conflicts_with = "at_flow")]
    at: Option<String>,
    /// Check U_T(x0) = DN(phi_T(x0)).
    #[arg(long)]
    at_flow: Option<String>,
    /// Margin tolerance (default 1e-8 (1 + |M|)).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    tolerances: Tolerances,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep configuration document.
    #[arg(long, conflicts_with_all = ["desk", "paper_scale"], required_unless_present_any = ["desk", "paper_scale"])]
    config: Option<PathBuf>,
    /// Built-in desk-scale configuration.
    #[arg(long, conflicts_with = "paper_scale")]
    desk: bool,
    /// Built-in paper-scale configuration.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct X0Arg {
    /// Initial state, comma separated.
    #[arg(id = "x0", long = "x0")]
    inline: Option<String>,
    /// Initial state file, one value per line.
    #[arg(id = "x0_file", long = "x0-file")]
    file: Option<PathBuf>,
}

#[derive(Args)]
struct X1Arg {
    /// Target state, comma separated.
    #[arg(id = "x1", long = "x1")]
    inline: Option<String>,
    /// Target state file, one value per line.
    #[arg(id = "x1_file", long = "x1-file")]
    file: Option<PathBuf>,
}

impl X0Arg {
    fn read(&self) -> Result<Vector, CliError> {
        VectorArg::new("x0", self.inline.as_deref(), self.file.as_deref()).read()
    }
}

impl X1Arg {
    fn read(&self) -> Result<Vector, CliError> {
        VectorArg::new("x1", self.inline.as_deref(), self.file.as_deref()).read()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScheduleDoc {
    horizon: f64,
    switch_time: f64,
    u: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SynthesisDoc {
    method: Method,
    #[serde(rename = "T")]
    horizon: f64,
    tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    u: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    schedule: Option<ScheduleDoc>,
    not_in_image: bool,
    image_residual: f64,
    spectral_margin: f64,
    rcond: f64,
    used_series: bool,
    warnings: Vec<String>,
    predicted_endpoint: Vec<f64>,
    rel_endpoint_error: f64,
}

#[derive(Serialize)]
struct SimulationDoc {
    #[serde(rename = "T")]
    horizon: f64,
    x_t: Vec<f64>,
    steps_accepted: usize,
    steps_rejected: usize,
    rhs_evaluations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    rel_endpoint_error: Option<f64>,
}

#[derive(Serialize)]
struct ChartSample {
    xi: Vec<f64>,
    x1: Vec<f64>,
    u: Vec<f64>,
    rel_endpoint_error: f64,
}

#[derive(Serialize)]
struct ChartDoc {
    #[serde(rename = "T")]
    horizon: f64,
    d: usize,
    k: usize,
    anchor: Vec<f64>,
    /// Row-major, `d` rows of `k` entries.
    basis: Vec<Vec<f64>>,
    spectral_margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    samples: Vec<ChartSample>,
}

#[derive(Serialize)]
struct SpectralDoc {
    matrix: String,
    #[serde(rename = "T")]
    horizon: f64,
    /// `[re, im]` pairs.
    eigenvalues: Vec<[f64; 2]>,
    margin: f64,
    tol: f64,
    status: &'static str,
}

fn to_vec(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `|reached − x1| / |x1 − x0|`, or the absolute error when `x1 = x0`.
fn endpoint_error(reached: &Vector, x0: &Vector, x1: &Vector) -> f64 {
    let err = (reached - x1).norm();
    let scale = (x1 - x0).norm();
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}

fn emit<T: Serialize>(doc: &T, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(doc).map_err(|e| CliError::Usage(e.to_string()))? + "\n";
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_model(path: &Path) -> Result<NetworkModel, CliError> {
    Ok(NetworkModel::load(path)?)
}

fn check_len(name: &str, v: &Vector, d: usize) -> Result<(), CliError> {
    if v.len() == d {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{name} has length {}, the model has d = {d}",
            v.len()
        )))
    }
}

fn cmd_synthesize(args: &SynthesizeArgs) -> Result<(), CliError> {
    let cfg = args.tol.config()?;
    let model = load_model(&args.model)?;
    let (x0, x1) = (args.x0.read()?, args.x1.read()?);
    let mut req = SynthesisRequest::new(&model, x0.clone(), x1.clone(), args.horizon, args.method);
    if let Some(tau) = args.tau {
        req = req.with_tau(tau);
    }
    let result = synthesize(&req, &cfg)?;
    let reached = simulate_controlled(&model, &x0, &result.input, args.horizon, &cfg)?.terminal_state;
    let (u, schedule) = match &result.input {
        ControlInput::Constant(u) => (Some(to_vec(u)), None),
        ControlInput::Step(s) => (
            None,
            Some(ScheduleDoc {
                horizon: s.horizon,
                switch_time: s.switch_time,
                u: to_vec(&s.after),
            }),
        ),
    };
    let doc = SynthesisDoc {
        method: args.method,
        horizon: args.horizon,
        tau: args.tau,
        u,
        schedule,
        not_in_image: result.not_in_image,
        image_residual: result.image_residual,
        spectral_margin: result.spectral_margin,
        rcond: result.diagnostics.rcond,
        used_series: result.diagnostics.used_series,
        warnings: result.diagnostics.warnings.clone(),
        predicted_endpoint: to_vec(&reached),
        rel_endpoint_error: endpoint_error(&reached, &x0, &x1),
    };
    for w in &doc.warnings {
        eprintln!("warning: {w}");
    }
    emit(&doc, args.out.as_deref())?;
    if result.not_in_image {
        return Err(CliError::Infeasible(format!(
            "target not in the image of B (residual {:.3e}); least-norm input written",
            result.image_residual
        )));
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn schedule_input(doc: ScheduleDoc, k: usize) -> ControlInput {
    ControlInput::Step(StepSchedule {
        horizon: doc.horizon,
        switch_time: doc.switch_time,
        before: Vector::zeros(k),
        after: Vector::from_vec(doc.u),
    })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let cfg = args.tol.config()?;
    let model = load_model(&args.model)?;
    let k = model.inputs();
    let x0 = args.x0.read()?;
    check_len("x0", &x0, model.dim())?;
    let input = if let Some(u) = &args.u {
        ControlInput::Constant(vectors::parse_inline("u", u)?)
    } else if let Some(path) = &args.schedule {
        schedule_input(read_json(path)?, k)
    } else if let Some(path) = &args.result {
        let doc: SynthesisDoc = read_json(path)?;
        match (doc.u, doc.schedule) {
            (Some(u), None) => ControlInput::Constant(Vector::from_vec(u)),
            (None, Some(s)) => schedule_input(s, k),
            _ => {
                return Err(CliError::Usage(format!(
                    "{}: expected exactly one of u or schedule",
                    path.display()
                )))
            }
        }
    } else {
        ControlInput::Constant(Vector::zeros(k))
    };
    let flow = simulate_controlled(&model, &x0, &input, args.horizon, &cfg)?;
    let rel_endpoint_error = match &args.x1 {
        Some(s) => {
            let x1 = vectors::parse_inline("x1", s)?;
            check_len("x1", &x1, model.dim())?;
            Some(endpoint_error(&flow.terminal_state, &x0, &x1))
        }
        None => None,
    };
    emit(
        &SimulationDoc {
            horizon: args.horizon,
            x_t: to_vec(&flow.terminal_state),
            steps_accepted: flow.steps_accepted,
            steps_rejected: flow.steps_rejected,
            rhs_evaluations: flow.rhs_evaluations,
            rel_endpoint_error,
        },
        args.out.as_deref(),
    )
}

fn cmd_reachable(args: &ReachableArgs) -> Result<(), CliError> {
    let cfg = args.tol.config()?;
    let base = load_model(&args.model)?;
    let d = base.dim();
    if args.k == 0 || args.k > d {
        return Err(CliError::Usage(format!("--k must lie in 1..={d}")));
    }
    if !(args.sigma2 >= 0.0 && args.sigma2.is_finite()) {
        return Err(CliError::Usage("--sigma2 must be non-negative".into()));
    }
    let model = base.with_canonical_inputs(args.k)?;
    let x0 = args.x0.read()?;
    check_len("x0", &x0, d)?;
    let chart = reachable_chart(&model, &x0, args.horizon, &cfg)?;
    let mut samples = Vec::with_capacity(args.sample);
    for i in 0..args.sample {
        let seed = harness::derive_seed(&[args.seed, i as u64]);
        let xi = harness::noise(seed, args.k) * args.sigma2.sqrt();
        let x1 = chart.target(&xi);
        let u = reachable_control(&chart, &x1)?;
        let reached =
            simulate_controlled(&model, &x0, &ControlInput::Constant(u.clone()), args.horizon, &cfg)?.terminal_state;
        samples.push(ChartSample {
            rel_endpoint_error: endpoint_error(&reached, &x0, &x1),
            xi: to_vec(&xi),
            x1: to_vec(&x1),
            u: to_vec(&u),
        });
    }
    if let Some(path) = &args.samples_csv {
        write_samples_csv(path, &samples)?;
    }
    let doc = ChartDoc {
        horizon: args.horizon,
        d,
        k: args.k,
        anchor: to_vec(&chart.anchor),
        basis: rows(&chart.basis.basis),
        spectral_margin: chart.spectral_margin,
        note: (args.k == d).then(|| "k = d: the chart spans the whole state space".to_string()),
        samples,
    };
    emit(&doc, args.out.as_deref())
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

fn write_samples_csv(path: &Path, samples: &[ChartSample]) -> Result<(), CliError> {
    let mut text = String::from("sample,rel_endpoint_error,xi,x1,u\n");
    for (i, s) in samples.iter().enumerate() {
        text += &format!(
            "{i},{:e},{},{},{}\n",
            s.rel_endpoint_error,
            join(&s.xi),
            join(&s.x1),
            join(&s.u)
        );
    }
    std::fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn cmd_check_spectral(args: &CheckSpectralArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let d = model.dim();
    let (label, m) = if let Some(s) = &args.at {
        let x = vectors::parse_inline("at", s)?;
        check_len("--at", &x, d)?;
        ("DN(x)".to_string(), model.drift_jacobian(&x))
    } else if let Some(s) = &args.at_flow {
        let cfg = args.tolerances.config()?;
        let x0 = vectors::parse_inline("at-flow", s)?;
        check_len("--at-flow", &x0, d)?;
        let anchor = rnn_constctl::flow::flow_forward(&model, &x0, args.horizon, &cfg)?.terminal_state;
        ("U_T(x0)".to_string(), model.drift_jacobian(&anchor))
    } else {
        ("A".to_string(), model.linear_part())
    };
    let tol = args.tol.unwrap_or_else(|| default_spectral_tol(&m));
    let check = spectral_condition(&m, args.horizon, tol)?;
    emit(
        &SpectralDoc {
            matrix: label,
            horizon: args.horizon,
            eigenvalues: check.eigenvalues.iter().map(|l| [l.re, l.im]).collect(),
            margin: check.margin,
            tol: check.tol,
            status: if check.ok { "ok" } else { "violated" },
        },
        args.out.as_deref(),
    )
}

fn harness_error(e: HarnessError) -> CliError {
    match e {
        HarnessError::Config(_) | HarnessError::Json(_) | HarnessError::Model(_) => CliError::Usage(e.to_string()),
        HarnessError::Flow(FlowError::Invalid(_)) => CliError::Usage(e.to_string()),
        HarnessError::Flow(_) => CliError::Numerical(e.to_string()),
        _ => CliError::Usage(e.to_string()),
    }
}

fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var("RNN_CONSTCTL_THREADS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Usage(format!("RNN_CONSTCTL_THREADS must be a positive integer, got '{s}'"))),
        Err(_) => Ok(None),
    }
}

fn print_summary(title: &str, records: &[TrialRecord]) {
    println!("{title}");
    println!("family,k,T,sigma2,method,n_ok,n_total,median_rel_error");
    for row in harness::summarize(records) {
        println!(
            "{},{},{},{},{},{},{},{:.3e}",
            row.family.as_str(),
            row.k,
            row.horizon,
            row.sigma2,
            row.method,
            row.n_ok,
            row.n_total,
            row.median_error
        );
    }
}

type Runner = fn(&harness::SweepConfig) -> Result<Vec<TrialRecord>, HarnessError>;

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let file = if args.desk {
        SweepFile::desk()
    } else if args.paper_scale {
        SweepFile::paper()
    } else {
        let path = args.config.as_ref().expect("clap enforces a config source");
        SweepFile::load(path).map_err(harness_error)?
    };
    let threads = thread_cap()?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::Usage(format!("{}: {e}", args.out_dir.display())))?;
    let jobs: [(&str, Option<&harness::SweepConfig>, Runner); 2] = [
        ("experiment1", file.experiment1.as_ref(), harness::run_experiment_1),
        ("experiment2", file.experiment2.as_ref(), harness::run_experiment_2),
    ];
    for (name, cfg, run) in jobs {
        let Some(cfg) = cfg else { continue };
        let records = harness::with_threads(threads, || run(cfg))
            .map_err(harness_error)?
            .map_err(harness_error)?;
        let path = args.out_dir.join(format!("{name}.csv"));
        harness::write_csv(&records, &path).map_err(harness_error)?;
        print_summary(
            &format!("# {name}: {} trials -> {}", records.len(), path.display()),
            &records,
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Reachable(a) => cmd_reachable(a),
        Command::CheckSpectral(a) => cmd_check_spectral(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
