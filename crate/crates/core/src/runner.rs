//! The online loop and its artifacts.
//!
//! Each step: measure the output, collect feedback and refit the affected
//! surrogates, estimate user gradients, solve the frozen instance for the
//! regret oracle, record, then apply one Jacobi primal-dual step.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{GpError, GpModel, Surrogate, SurrogateKind};
use crate::metrics::{
    acv, bound_curves, fit, gradient_error_metrics, path_lengths, regret_global, regret_network, regret_user,
    BoundConstants, MetricsError, RunningTotals, StepRecord,
};
use crate::network::NetworkError;
use crate::scenario::{build_scenario, feedback_event, gibbs_seed, measurement_seed, ConfigError, Scenario, ScenarioConfig};
use crate::solver::{pd_step, solve_instance_oracle, FrozenConstraint, FrozenProblem, SolverError, SolverState, StepInputs};

/// How user gradients are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Shape-constrained GP surrogate.
    Gp,
    /// Unconstrained GP surrogate.
    GpPlain,
    /// True gradients.
    Clairvoyant,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Gp, Mode::GpPlain, Mode::Clairvoyant];

    fn surrogate_kind(self) -> Option<SurrogateKind> {
        match self {
            Mode::Gp => Some(SurrogateKind::ShapeConstrained),
            Mode::GpPlain => Some(SurrogateKind::Plain),
            Mode::Clairvoyant => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Gp => "gp",
            Mode::GpPlain => "gp_plain",
            Mode::Clairvoyant => "clairvoyant",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gp" => Ok(Mode::Gp),
            "gp_plain" => Ok(Mode::GpPlain),
            "clairvoyant" => Ok(Mode::Clairvoyant),
            _ => Err(format!("unknown mode `{s}` (expected gp, gp_plain or clairvoyant)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("runs have different horizons: {0}")]
    MismatchedHorizons(String),
}

impl RunError {
    /// Stable error class name for machine-readable reporting.
    pub fn class(&self) -> &'static str {
        match self {
            RunError::Config(_) => "ConfigError",
            RunError::Io(_) => "IoError",
            RunError::Solver(SolverError::BadInterval { .. }) => "BadInterval",
            RunError::Solver(SolverError::NoConvergence { .. }) => "NoConvergence",
            RunError::Solver(_) => "SolverError",
            RunError::Network(NetworkError::HorizonExceeded { .. }) => "HorizonExceeded",
            RunError::Network(_) => "NetworkError",
            RunError::Gp(GpError::SingularKernel) => "SingularKernel",
            RunError::Gp(_) => "GpError",
            RunError::Metrics(MetricsError::MissingOracle { .. }) => "MissingOracle",
            RunError::Metrics(_) => "MetricsError",
            RunError::MismatchedHorizons(_) => "MismatchedHorizons",
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> RunError {
    RunError::Io(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    /// `None` uses the built-in default scenario.
    pub config_path: Option<PathBuf>,
    pub mode: Mode,
    /// Overrides the config seed when given.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub steps_override: Option<usize>,
    pub oracle_cadence: Option<usize>,
}

/// Knobs of an in-memory simulation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimOptions {
    pub mode: Mode,
    pub steps: Option<usize>,
    pub oracle_cadence: Option<usize>,
    /// Keep per-step records in the outcome (needed for metrics).
    pub keep_records: bool,
}

impl SimOptions {
    pub fn new(mode: Mode) -> Self {
        Self { mode, steps: None, oracle_cadence: None, keep_records: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub cadence: usize,
    /// Steps whose optimum was held over from an earlier solve.
    pub held_steps: usize,
    /// Steps at which the oracle failed and its last iterate was used.
    pub failures: Vec<usize>,
    pub max_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    pub step_s: f64,
    pub alpha: f64,
    pub regret_global: f64,
    pub regret_network: Vec<f64>,
    pub regret_user: Vec<Vec<f64>>,
    pub acv: f64,
    pub fit: f64,
    pub phi: f64,
    pub upsilon: f64,
    pub xi: f64,
    /// Sum of squared gradient errors, used in place of the unobservable error bound.
    pub xi_sq_proxy: f64,
    pub regret_bound: f64,
    pub acv_bound: f64,
    pub bound_constants: BoundConstants,
    pub gamma_x: f64,
    pub gamma_kappa: f64,
    /// Fraction of steps with `C^t(y^t) <= 0`.
    pub feasible_fraction: f64,
    pub feedback_events: Vec<Vec<usize>>,
    /// Refits whose curvature estimate fell back to clamping.
    pub truncation_fallbacks: usize,
    /// Refits that needed diagonal jitter to factorize.
    pub jittered_fits: usize,
    pub final_consensus_residual: f64,
    pub oracle: OracleReport,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: Summary,
    /// Step CSV, byte for byte as written to disk.
    pub csv: String,
    pub records: Vec<StepRecord>,
    pub models: Vec<Vec<GpModel>>,
    pub final_state: SolverState,
}

/// Header of the step CSV for a given topology.
pub fn csv_header(device_users: &[usize]) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..device_users.len()).map(|m| format!("x_dev_{m}")));
    for (m, &n) in device_users.iter().enumerate() {
        h.extend((0..n).map(|j| format!("x_user_{m}_{j}")));
    }
    h.extend(
        ["nu", "lambda_norm", "y", "y_ref", "c_val", "acv_running", "reg_running", "xi_running", "Xi_running", "consensus_residual"]
            .map(String::from),
    );
    h
}

/// Minimizer of a surrogate over `[lo, hi]` by grid search.
fn surrogate_argmin(s: &Surrogate, lo: f64, hi: f64) -> f64 {
    const GRID: usize = 200;
    let mut best = (lo, s.value(lo));
    for i in 1..=GRID {
        let x = lo + (hi - lo) * i as f64 / GRID as f64;
        let v = s.value(x);
        if v < best.1 {
            best = (x, v);
        }
    }
    best.0
}

/// Initial state shared by every mode: devices at their interval midpoints,
/// users at the minimizer of the shape-constrained surrogate fitted on their prior points.
pub fn initial_state(s: &Scenario) -> Result<SolverState, RunError> {
    let ivs = s.intervals();
    let x_dev = ivs.iter().map(|i| i.midpoint()).collect();
    let mut x_user = Vec::with_capacity(ivs.len());
    for (m, models) in s.gp_models.iter().enumerate() {
        let mut row = Vec::with_capacity(models.len());
        for model in models {
            let sur = model.surrogate(SurrogateKind::ShapeConstrained)?;
            row.push(surrogate_argmin(&sur, ivs[m].lo, ivs[m].hi));
        }
        x_user.push(row);
    }
    Ok(SolverState::new(x_dev, x_user, s.config.alpha))
}

fn frozen_problem(s: &Scenario, t: usize) -> Result<FrozenProblem, RunError> {
    let a = s.plant.a_at(t)?;
    Ok(FrozenProblem {
        device_costs: s.costs(),
        intervals: s.intervals(),
        constraint: Some(FrozenConstraint {
            a_row: a.row(0).iter().copied().collect(),
            offset: s.plant.offset(t)?[0],
            y_ref: s.constraint.y_ref(t)?,
            beta: s.constraint.beta(),
            zeta: s.constraint.zeta(t)?,
        }),
    })
}

struct CsvSink {
    w: csv::Writer<Vec<u8>>,
}

impl CsvSink {
    fn new(header: &[String]) -> Self {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(header).expect("writing to memory");
        Self { w }
    }

    fn row(&mut self, fields: Vec<String>) {
        self.w.write_record(&fields).expect("writing to memory");
    }

    fn finish(self) -> String {
        String::from_utf8(self.w.into_inner().expect("flushing to memory")).expect("csv output is ASCII")
    }
}

/// `ν ∈ [0, B_ν]`, `‖λ‖ ≤ B_λ` and every primal value inside its interval.
fn step_invariants_hold(state: &SolverState, s: &Scenario, t: usize) -> bool {
    let slack = 1e-9 * (1.0 + s.sets.lambda_radius);
    let in_sets = state.x_dev.iter().zip(&state.x_user).enumerate().all(|(m, (xd, xu))| {
        let iv = s.sets.x_intervals[m].at(t);
        iv.contains(*xd) && xu.iter().all(|x| iv.contains(*x))
    });
    in_sets && (0.0..=s.sets.nu_cap).contains(&state.nu) && state.lambda_norm() <= s.sets.lambda_radius + slack
}

/// Runs the online loop on an assembled scenario without touching the filesystem.
pub fn simulate(s: &Scenario, opts: SimOptions) -> Result<RunOutcome, RunError> {
    let cfg = &s.config;
    let n_steps = opts.steps.unwrap_or(s.n_steps).min(s.n_steps);
    let cadence = opts.oracle_cadence.unwrap_or(cfg.oracle.cadence).max(1);
    let top = &s.topology;
    let ivs = s.intervals();
    let costs = s.costs();
    let kind = opts.mode.surrogate_kind();
    let meas_seed = measurement_seed(cfg.seed);

    let mut models = s.gp_models.clone();
    let mut surrogates: Vec<Vec<Option<Surrogate>>> = models
        .iter()
        .map(|row| row.iter().map(|m| kind.map(|k| m.surrogate(k)).transpose()).collect::<Result<_, _>>())
        .collect::<Result<_, _>>()?;
    let mut state = initial_state(s)?;
    let mut sink = CsvSink::new(&csv_header(top.device_users()));
    let mut totals = RunningTotals::default();
    let mut records = Vec::new();
    let mut feedback_events = vec![Vec::new(); cfg.users.len()];
    let mut fallbacks = 0;
    let mut jittered = 0;
    let mut oracle = OracleReport { cadence, held_steps: 0, failures: Vec::new(), max_residual: 0.0 };
    let mut warnings = Vec::new();
    let mut x_star: Option<Vec<f64>> = None;
    let mut feasible = 0usize;

    for t in 0..n_steps {
        let y = s.plant.model_output(t, &state.x_dev)?[0];
        let y_hat = s.plant.measure_output(t, &state.x_dev, meas_seed)?[0];
        let c_hat = s.constraint.constraint_value(t, y_hat)?;
        let dc_hat = s.constraint.constraint_gradient(t, y_hat)?;
        let c_val = s.constraint.constraint_value(t, y)?;
        if c_val <= 0.0 {
            feasible += 1;
        }

        // Feedback and refits read the time-t user copies.
        let mut g_est = Vec::with_capacity(top.n_devices());
        let mut g_true = Vec::with_capacity(top.n_devices());
        for (m, users) in s.users.iter().enumerate() {
            let iv = ivs[m];
            let mut ge = Vec::with_capacity(users.len());
            let mut gt = Vec::with_capacity(users.len());
            for (n, u) in users.iter().enumerate() {
                let id = s.user_ids[m][n];
                let x = state.x_user[m][n];
                if let Some(k) = kind {
                    if let Some((xf, z)) = feedback_event(u, id, t, cfg.step_s, x, cfg.seed) {
                        let model = &mut models[m][n];
                        model.add_feedback(xf, z);
                        if k == SurrogateKind::ShapeConstrained && model.refresh_curvature(gibbs_seed(cfg.seed, id, t), &s.gibbs)? {
                            fallbacks += 1;
                        }
                        let sur = model.surrogate(k)?;
                        if sur.jitter() > 0.0 {
                            jittered += 1;
                        }
                        surrogates[m][n] = Some(sur);
                        feedback_events[id].push(t);
                    }
                }
                let truth = u.quadratic().gradient(x);
                let est = match &surrogates[m][n] {
                    Some(sur) => sur.gradient(x, s.delta[m], iv.lo, iv.hi)?,
                    None => truth,
                };
                ge.push(est);
                gt.push(truth);
            }
            g_est.push(ge);
            g_true.push(gt);
        }

        let fresh = t % cadence == 0 || x_star.is_none();
        if fresh {
            match solve_instance_oracle(&frozen_problem(s, t)?, cfg.oracle.tol, cfg.oracle.max_iter) {
                Ok(sol) => {
                    oracle.max_residual = oracle.max_residual.max(sol.residual);
                    x_star = Some(sol.x_dev);
                }
                Err(SolverError::NoConvergence { residual, last }) => {
                    oracle.failures.push(t);
                    if oracle.failures.len() <= 10 {
                        warnings.push(format!("NoConvergence at step {t}: oracle residual {residual:e}, last iterate used"));
                    }
                    x_star = Some(last);
                }
                Err(e) => return Err(e.into()),
            }
        } else {
            oracle.held_steps += 1;
        }

        let rec = StepRecord {
            t,
            x_dev: state.x_dev.clone(),
            x_user: state.x_user.clone(),
            nu: state.nu,
            lambda: state.lambda.clone(),
            y_hat,
            y,
            y_ref: s.constraint.y_ref(t)?,
            c_val,
            g_est,
            g_true,
            x_star: x_star.clone(),
            oracle_fresh: fresh,
        };
        totals.push(&rec, &costs)?;
        let residual = top.consensus_residual(&state.x_dev, &state.x_user)?;
        let mut row = Vec::with_capacity(16);
        row.push(t.to_string());
        row.extend(state.x_dev.iter().map(f64::to_string));
        row.extend(state.x_user.iter().flatten().map(f64::to_string));
        for v in [state.nu, state.lambda_norm(), y, rec.y_ref, c_val, totals.acv, totals.regret, totals.xi, totals.big_xi, residual] {
            row.push(v.to_string());
        }
        sink.row(row);
        let user_grads = rec.g_est.clone();
        if opts.keep_records {
            records.push(rec);
        }

        let active: Vec<bool> = cfg.devices.iter().map(|d| t % d.update_every == 0).collect();
        let a = s.plant.a_at(t)?;
        let inputs = StepInputs { t, a_matrix: a, grad_c: &[dc_hat], c_val: c_hat, user_grads: &user_grads, device_active: &active };
        state = pd_step(&state, top, &s.sets, &inputs)?;
        debug_assert!(step_invariants_hold(&state, s, t), "iterate left its sets at step {t}");
    }
    if oracle.failures.len() > 10 {
        warnings.push(format!("NoConvergence at {} steps in total", oracle.failures.len()));
    }
    if oracle.held_steps > 0 {
        warnings.push(format!(
            "oracle solved every {cadence} steps; optima held in between, so regret and path lengths are approximate"
        ));
    }

    let constants = BoundConstants::for_scenario(s);
    let summary = if opts.keep_records {
        let (phi, upsilon) = path_lengths(&records)?;
        let (xi, xi_sq) = gradient_error_metrics(&records);
        let curves = bound_curves(&records, &constants, cfg.alpha)?;
        Summary {
            mode: opts.mode,
            seed: cfg.seed,
            steps: n_steps,
            step_s: cfg.step_s,
            alpha: cfg.alpha,
            regret_global: regret_global(&records, &costs)?,
            regret_network: (0..top.n_devices()).map(|m| regret_network(&records, &costs, m)).collect::<Result<_, _>>()?,
            regret_user: (0..top.n_devices())
                .map(|m| (0..top.device_users()[m]).map(|j| regret_user(&records, &costs, m, j)).collect())
                .collect::<Result<_, _>>()?,
            acv: acv(&records),
            fit: fit(&records),
            phi,
            upsilon,
            xi,
            xi_sq_proxy: xi_sq,
            regret_bound: curves.regret.last().copied().unwrap_or(0.0),
            acv_bound: curves.acv.last().copied().unwrap_or(0.0),
            bound_constants: constants,
            gamma_x: constants.gamma_x(),
            gamma_kappa: constants.gamma_kappa(),
            feasible_fraction: feasible as f64 / n_steps.max(1) as f64,
            feedback_events,
            truncation_fallbacks: fallbacks,
            jittered_fits: jittered,
            final_consensus_residual: top.consensus_residual(&state.x_dev, &state.x_user)?,
            oracle,
            warnings,
        }
    } else {
        Summary {
            mode: opts.mode,
            seed: cfg.seed,
            steps: n_steps,
            step_s: cfg.step_s,
            alpha: cfg.alpha,
            regret_global: totals.regret,
            regret_network: Vec::new(),
            regret_user: Vec::new(),
            acv: totals.acv,
            fit: f64::NAN,
            phi: f64::NAN,
            upsilon: f64::NAN,
            xi: totals.xi,
            xi_sq_proxy: totals.big_xi,
            regret_bound: f64::NAN,
            acv_bound: f64::NAN,
            bound_constants: constants,
            gamma_x: constants.gamma_x(),
            gamma_kappa: constants.gamma_kappa(),
            feasible_fraction: feasible as f64 / n_steps.max(1) as f64,
            feedback_events,
            truncation_fallbacks: fallbacks,
            jittered_fits: jittered,
            final_consensus_residual: top.consensus_residual(&state.x_dev, &state.x_user)?,
            oracle,
            warnings,
        }
    };
    Ok(RunOutcome { summary, csv: sink.finish(), records, models, final_state: state })
}

/// Loads the config, applies the overrides and simulates.
pub fn load_scenario(config_path: Option<&Path>, seed: Option<u64>) -> Result<Scenario, RunError> {
    let mut cfg = match config_path {
        Some(p) => ScenarioConfig::from_path(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(build_scenario(&cfg)?)
}

/// Full run: simulate, then write `steps.csv`, `summary.json` and one
/// `gp_user_<m>_<n>.json` snapshot per user (GP modes only).
pub fn run(spec: &RunSpec) -> Result<RunOutcome, RunError> {
    let scenario = load_scenario(spec.config_path.as_deref(), spec.seed)?;
    let opts = SimOptions { mode: spec.mode, steps: spec.steps_override, oracle_cadence: spec.oracle_cadence, keep_records: true };
    let out = simulate(&scenario, opts)?;
    let dir = &spec.output_dir;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let write = |name: &str, body: &str| -> Result<(), RunError> {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| io_err(&p, e))
    };
    write("steps.csv", &out.csv)?;
    write("summary.json", &serde_json::to_string_pretty(&out.summary).expect("summary serializes"))?;
    if spec.mode != Mode::Clairvoyant {
        for (m, row) in out.models.iter().enumerate() {
            for (n, model) in row.iter().enumerate() {
                write(&format!("gp_user_{m}_{n}.json"), &serde_json::to_string_pretty(model).expect("model serializes"))?;
            }
        }
    }
    Ok(out)
}

/// Aligns the regret, ACV and ξ running columns of several run directories.
/// Gap columns are relative to the first run.
pub fn compare(run_dirs: &[PathBuf]) -> Result<String, RunError> {
    if run_dirs.len() < 2 {
        return Err(RunError::Io("compare needs at least two run directories".into()));
    }
    const COLS: [&str; 3] = ["reg_running", "acv_running", "xi_running"];
    let mut runs: Vec<Vec<[f64; 3]>> = Vec::new();
    let mut ts: Vec<String> = Vec::new();
    for (k, dir) in run_dirs.iter().enumerate() {
        let path = dir.join("steps.csv");
        let mut rdr = csv::Reader::from_path(&path).map_err(|e| io_err(&path, e))?;
        let header = rdr.headers().map_err(|e| io_err(&path, e))?.clone();
        let idx: Vec<usize> = COLS
            .iter()
            .map(|c| header.iter().position(|h| h == *c).ok_or_else(|| io_err(&path, format!("missing column {c}"))))
            .collect::<Result<_, _>>()?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| io_err(&path, e))?;
            let mut v = [0.0; 3];
            for (slot, &i) in v.iter_mut().zip(&idx) {
                *slot = rec[i].parse().map_err(|e| io_err(&path, e))?;
            }
            if k == 0 {
                ts.push(rec[0].to_string());
            }
            rows.push(v);
        }
        if let Some(first) = runs.first() {
            if first.len() != rows.len() {
                return Err(RunError::MismatchedHorizons(format!(
                    "{} has {} steps, {} has {}",
                    run_dirs[0].display(),
                    first.len(),
                    dir.display(),
                    rows.len()
                )));
            }
        }
        runs.push(rows);
    }
    let mut header = vec!["t".to_string()];
    for k in 0..runs.len() {
        header.extend(COLS.iter().map(|c| format!("{c}_{k}")));
    }
    for k in 1..runs.len() {
        header.extend(["reg_gap", "acv_gap", "xi_gap"].iter().map(|c| format!("{c}_{k}")));
    }
    let mut sink = CsvSink::new(&header);
    for (i, t) in ts.iter().enumerate() {
        let mut row = vec![t.clone()];
        for r in &runs {
            row.extend(r[i].iter().map(f64::to_string));
        }
        for r in &runs[1..] {
            row.extend((0..3).map(|c| (r[i][c] - runs[0][i][c]).to_string()));
        }
        sink.row(row);
    }
    Ok(sink.finish())
}
