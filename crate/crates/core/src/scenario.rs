//! The demand-response experiment: devices shared by users with quadratic
//! discomfort, a tracking constraint on total power, and sporadic noisy feedback.
//!
//! [`ScenarioConfig`] is the TOML schema; [`build_scenario`] validates it and
//! assembles an immutable [`Scenario`] bundle.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{GibbsSettings, GpModel, KernelParams, ShapeBounds};
use crate::network::{build_incidence, Plant, SyntheticLoad, Topology, Trace, TrackingConstraint, LOAD_COLUMN, REF_COLUMN};
use crate::solver::{Interval, IntervalSeries, ProjectionSets, Quadratic};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{path}: {msg}")]
pub struct ConfigError {
    /// Dotted path of the offending field, e.g. `users[2].quad_a`.
    pub path: String,
    pub msg: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Self { path: path.into(), msg: msg.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    /// The device primal step runs on steps divisible by this; otherwise its value is held.
    #[serde(default = "one")]
    pub update_every: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub device: usize,
    pub quad_a: f64,
    /// Optional linear coefficient of `a x² + b x + c`; when given, `preferred` must be absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quad_b: Option<f64>,
    #[serde(default)]
    pub quad_c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferred: Option<f64>,
    pub feedback_period_s: f64,
    /// Time of the first feedback event; `None` staggers users by 300 s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_phase_s: Option<f64>,
    #[serde(default = "default_feedback_noise")]
    pub feedback_noise_std: f64,
}

fn default_feedback_noise() -> f64 {
    1.5
}

impl UserSpec {
    /// The true cost in vertex form. `a x² + b x + c` becomes
    /// `a (x + b/2a)² + c − b²/4a`.
    pub fn quadratic(&self) -> Quadratic {
        match self.quad_b {
            Some(b) => {
                Quadratic { a: self.quad_a, preferred: -b / (2.0 * self.quad_a), c: self.quad_c - b * b / (4.0 * self.quad_a) }
            }
            None => Quadratic { a: self.quad_a, preferred: self.preferred.unwrap_or(0.0), c: self.quad_c },
        }
    }
}

pub fn true_cost(user: &UserSpec, x: f64) -> f64 {
    user.quadratic().value(x)
}

pub fn true_gradient(user: &UserSpec, x: f64) -> f64 {
    user.quadratic().gradient(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpConfig {
    pub sigma_f: f64,
    pub ell: f64,
    pub sigma_n: f64,
    #[serde(default)]
    pub mu0: f64,
    pub gamma_u: f64,
    pub l_u: f64,
    /// Enforcement points per device interval.
    pub q: usize,
    /// Finite-difference width as a fraction of the device interval width.
    pub delta_frac: f64,
    pub burn_in: usize,
    pub n_samples: usize,
    /// Noisy evaluations drawn per user before the run starts.
    pub prior_points: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            sigma_f: 20.0,
            ell: 10.0,
            sigma_n: 1.5,
            mu0: 0.0,
            gamma_u: 0.5,
            l_u: 2.0,
            q: 8,
            delta_frac: 1e-2,
            burn_in: 100,
            n_samples: 500,
            prior_points: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub beta: f64,
    pub zeta_fraction: f64,
    pub nu_cap: f64,
    /// Overrides the default radius `N_max·h_max·L·M + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_radius: Option<f64>,
    #[serde(default)]
    pub meas_noise_std: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self { beta: 1.0, zeta_fraction: 0.05, nu_cap: 100.0, lambda_radius: None, meas_noise_std: 0.5 }
    }
}

/// Exogenous load: a CSV trace (`timestamp_s,load_kw`) or a synthetic profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LoadConfig {
    Csv { path: PathBuf },
    Synthetic(SyntheticLoad),
}

/// Reference signal: a CSV trace (`timestamp_s,y_ref_kw`) or equal-length constant segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceConfig {
    Csv { path: PathBuf },
    Piecewise { levels_kw: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// The oracle is solved every `cadence` steps and held in between.
    pub cadence: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200_000, cadence: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub horizon_s: f64,
    pub step_s: f64,
    pub alpha: f64,
    pub devices: Vec<DeviceSpec>,
    pub users: Vec<UserSpec>,
    #[serde(default)]
    pub gp: GpConfig,
    #[serde(default)]
    pub constraint: ConstraintConfig,
    pub load: LoadConfig,
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    /// Directory that relative trace paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    /// Three devices (battery, HVAC, EV charger) shared by 2, 3 and 1 users over 12 h at 5 s steps.
    fn default() -> Self {
        let user = |device, preferred: f64, k: usize| UserSpec {
            device,
            quad_a: 0.5,
            quad_b: None,
            quad_c: 0.0,
            preferred: Some(preferred),
            feedback_period_s: 1800.0,
            feedback_phase_s: Some(300.0 * k as f64),
            feedback_noise_std: 1.5,
        };
        Self {
            seed: 1,
            horizon_s: 43_200.0,
            step_s: 5.0,
            alpha: 0.05,
            devices: vec![
                DeviceSpec { name: "battery".into(), lo: -8.0, hi: 8.0, update_every: 1 },
                DeviceSpec { name: "hvac".into(), lo: 0.0, hi: 10.0, update_every: 6 },
                DeviceSpec { name: "ev".into(), lo: 2.0, hi: 30.0, update_every: 1 },
            ],
            users: vec![
                user(0, -4.0, 0),
                user(0, 4.0, 1),
                user(1, 2.0, 2),
                user(1, 5.0, 3),
                user(1, 8.0, 4),
                user(2, 14.0, 5),
            ],
            gp: GpConfig::default(),
            constraint: ConstraintConfig::default(),
            load: LoadConfig::Synthetic(SyntheticLoad::default()),
            reference: ReferenceConfig::Piecewise { levels_kw: vec![62.0, 65.0, 55.0, 58.0] },
            oracle: OracleConfig::default(),
            base_dir: None,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        toml::from_str(s).map_err(|e| {
            let path = match e.span() {
                Some(sp) if sp.start > 0 => format!("line {}", s[..sp.start].matches('\n').count() + 1),
                _ => "config".into(),
            };
            ConfigError::new(path, e.message().to_string())
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon_s / self.step_s + 1e-9).floor() as usize
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Checks every field, reporting the first failure with its path.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let pos = |v: f64, path: &str| -> Result<(), ConfigError> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::new(path, format!("must be a positive finite number, got {v}")))
            }
        };
        pos(self.step_s, "step_s")?;
        pos(self.alpha, "alpha")?;
        if !(self.horizon_s >= self.step_s) {
            return Err(ConfigError::new("horizon_s", "must be at least step_s"));
        }
        if self.devices.is_empty() {
            return Err(ConfigError::new("devices", "at least one device is required"));
        }
        for (m, d) in self.devices.iter().enumerate() {
            if !(d.lo <= d.hi) || !d.lo.is_finite() || !d.hi.is_finite() {
                return Err(ConfigError::new(format!("devices[{m}].lo"), format!("interval [{}, {}] is empty", d.lo, d.hi)));
            }
            if d.update_every == 0 {
                return Err(ConfigError::new(format!("devices[{m}].update_every"), "must be >= 1"));
            }
        }
        for (k, u) in self.users.iter().enumerate() {
            let p = |f: &str| format!("users[{k}].{f}");
            if u.device >= self.devices.len() {
                return Err(ConfigError::new(p("device"), format!("no device with index {}", u.device)));
            }
            pos(u.quad_a, &p("quad_a"))?;
            pos(u.feedback_period_s, &p("feedback_period_s"))?;
            if !(u.feedback_noise_std >= 0.0) {
                return Err(ConfigError::new(p("feedback_noise_std"), "must be >= 0"));
            }
            match (u.quad_b, u.preferred) {
                (Some(_), Some(_)) => return Err(ConfigError::new(p("quad_b"), "give either quad_b or preferred, not both")),
                (None, None) => return Err(ConfigError::new(p("preferred"), "either quad_b or preferred is required")),
                _ => {}
            }
            let d = &self.devices[u.device];
            let pref = u.quadratic().preferred;
            if !(d.lo <= pref && pref <= d.hi) {
                return Err(ConfigError::new(p("preferred"), format!("minimizer {pref} lies outside [{}, {}]", d.lo, d.hi)));
            }
        }
        for m in 0..self.devices.len() {
            if !self.users.iter().any(|u| u.device == m) {
                return Err(ConfigError::new(format!("devices[{m}]"), "device has no users"));
            }
        }
        let g = &self.gp;
        pos(g.sigma_f, "gp.sigma_f")?;
        pos(g.ell, "gp.ell")?;
        if !(g.sigma_n >= 0.0) {
            return Err(ConfigError::new("gp.sigma_n", "must be >= 0"));
        }
        pos(g.gamma_u, "gp.gamma_u")?;
        if !(g.l_u >= g.gamma_u) {
            return Err(ConfigError::new("gp.l_u", "must be >= gp.gamma_u"));
        }
        pos(g.delta_frac, "gp.delta_frac")?;
        if g.n_samples == 0 {
            return Err(ConfigError::new("gp.n_samples", "must be >= 1"));
        }
        let c = &self.constraint;
        pos(c.beta, "constraint.beta")?;
        pos(c.zeta_fraction, "constraint.zeta_fraction")?;
        pos(c.nu_cap, "constraint.nu_cap")?;
        if let Some(r) = c.lambda_radius {
            pos(r, "constraint.lambda_radius")?;
        }
        if !(c.meas_noise_std >= 0.0) {
            return Err(ConfigError::new("constraint.meas_noise_std", "must be >= 0"));
        }
        if let ReferenceConfig::Piecewise { levels_kw } = &self.reference {
            if levels_kw.is_empty() {
                return Err(ConfigError::new("reference.levels_kw", "needs at least one level"));
            }
        }
        if self.oracle.cadence == 0 {
            return Err(ConfigError::new("oracle.cadence", "must be >= 1"));
        }
        pos(self.oracle.tol, "oracle.tol")?;
        Ok(())
    }
}

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Stream {
    Feedback = 1,
    Prior = 2,
    Measurement = 3,
    Load = 4,
    Gibbs = 5,
}

pub(crate) fn derive_seed(seed: u64, stream: Stream) -> u64 {
    // splitmix64 finalizer keeps derived seeds well separated.
    let mut z = seed ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Whether user feedback fires at time `t_s`: `(t_s − phase) mod period < step_s`.
pub fn feedback_due(user: &UserSpec, user_index: usize, t_s: f64, step_s: f64) -> bool {
    let phase = user.feedback_phase_s.unwrap_or(300.0 * user_index as f64);
    (t_s - phase).rem_euclid(user.feedback_period_s) < step_s
}

/// Feedback of user `user_index` at step `t`: `Some((x, U(x) + ε))` on a
/// feedback step, otherwise `None`. The noise is a pure function of
/// `(seed, user_index, t)`.
pub fn feedback_event(
    user: &UserSpec,
    user_index: usize,
    t: usize,
    step_s: f64,
    x_current: f64,
    seed: u64,
) -> Option<(f64, f64)> {
    if !feedback_due(user, user_index, t as f64 * step_s, step_s) {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Feedback));
    rng.set_stream(((user_index as u64) << 40) | t as u64);
    let e: f64 = StandardNormal.sample(&mut rng);
    Some((x_current, true_cost(user, x_current) + user.feedback_noise_std * e))
}

/// Runnable bundle assembled from a validated config.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub topology: Topology,
    pub plant: Plant,
    pub constraint: TrackingConstraint,
    pub sets: ProjectionSets,
    /// Users grouped by device, in config order within each device.
    pub users: Vec<Vec<UserSpec>>,
    /// Config index of each grouped user (used for seeds and phases).
    pub user_ids: Vec<Vec<usize>>,
    /// Initial GP models fitted on the prior points.
    pub gp_models: Vec<Vec<GpModel>>,
    /// Finite-difference width per device.
    pub delta: Vec<f64>,
    pub gibbs: GibbsSettings,
    pub n_steps: usize,
}

impl Scenario {
    pub fn intervals(&self) -> Vec<Interval> {
        self.config.devices.iter().map(|d| Interval { lo: d.lo, hi: d.hi }).collect()
    }

    pub fn costs(&self) -> Vec<Vec<Quadratic>> {
        self.users.iter().map(|us| us.iter().map(UserSpec::quadratic).collect()).collect()
    }

    /// Lipschitz constant of the stacked user cost over the box:
    /// `‖∇f‖ = (Σ (2 a_{m,n} max|x − p_{m,n}|)²)^{1/2}`, the maximum taken at the
    /// interval end farthest from each minimizer.
    pub fn lipschitz(&self) -> f64 {
        lipschitz(&self.costs(), &self.intervals())
    }
}

pub(crate) fn lipschitz(costs: &[Vec<Quadratic>], intervals: &[Interval]) -> f64 {
    let mut s = 0.0;
    for (m, cs) in costs.iter().enumerate() {
        for q in cs {
            let far = (intervals[m].lo - q.preferred).abs().max((intervals[m].hi - q.preferred).abs());
            s += (2.0 * q.a * far).powi(2);
        }
    }
    s.sqrt()
}

fn piecewise(levels: &[f64], n_steps: usize) -> Vec<f64> {
    let k = levels.len();
    (0..n_steps).map(|t| levels[(t * k / n_steps.max(1)).min(k - 1)]).collect()
}

fn load_series(cfg: &ScenarioConfig, n_steps: usize) -> Result<Vec<f64>, ConfigError> {
    match &cfg.load {
        LoadConfig::Csv { path } => Trace::from_path(&cfg.resolve(path), LOAD_COLUMN)
            .and_then(|tr| tr.resample(cfg.step_s, n_steps))
            .map_err(|e| ConfigError::new("load.csv.path", e.to_string())),
        LoadConfig::Synthetic(s) => s
            .generate(cfg.step_s, n_steps, derive_seed(cfg.seed, Stream::Load))
            .map_err(|e| ConfigError::new("load.synthetic", e.to_string())),
    }
}

fn reference_series(cfg: &ScenarioConfig, n_steps: usize) -> Result<Vec<f64>, ConfigError> {
    match &cfg.reference {
        ReferenceConfig::Csv { path } => Trace::from_path(&cfg.resolve(path), REF_COLUMN)
            .and_then(|tr| tr.resample(cfg.step_s, n_steps))
            .map_err(|e| ConfigError::new("reference.csv.path", e.to_string())),
        ReferenceConfig::Piecewise { levels_kw } => Ok(piecewise(levels_kw, n_steps)),
    }
}

pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario, ConfigError> {
    config.validate()?;
    let n_steps = config.n_steps();
    let m_dev = config.devices.len();

    let mut users = vec![Vec::new(); m_dev];
    let mut user_ids = vec![Vec::new(); m_dev];
    for (k, u) in config.users.iter().enumerate() {
        users[u.device].push(u.clone());
        user_ids[u.device].push(k);
    }
    let counts: Vec<usize> = users.iter().map(Vec::len).collect();
    let topology = build_incidence(&counts).map_err(|e| ConfigError::new("users", e.to_string()))?;

    let load = load_series(config, n_steps)?;
    let plant = Plant::total_power(m_dev, &load, config.constraint.meas_noise_std)
        .map_err(|e| ConfigError::new("load", e.to_string()))?;
    let y_ref = reference_series(config, n_steps)?;
    let constraint = TrackingConstraint::with_relative_tolerance(config.constraint.beta, y_ref, config.constraint.zeta_fraction)
        .map_err(|e| ConfigError::new("reference", e.to_string()))?;

    let intervals: Vec<Interval> = config.devices.iter().map(|d| Interval { lo: d.lo, hi: d.hi }).collect();
    let costs: Vec<Vec<Quadratic>> = users.iter().map(|us| us.iter().map(UserSpec::quadratic).collect()).collect();
    // Star graphs have diameter h_max = 2.
    let n_max = *counts.iter().max().unwrap_or(&1) as f64;
    let default_radius = n_max * 2.0 * lipschitz(&costs, &intervals) * m_dev as f64 + 1.0;
    let sets = ProjectionSets {
        x_intervals: intervals.iter().map(|&i| IntervalSeries::Constant(i)).collect(),
        nu_cap: config.constraint.nu_cap,
        lambda_radius: config.constraint.lambda_radius.unwrap_or(default_radius),
    };

    let g = &config.gp;
    let params = KernelParams::new(g.sigma_f, g.ell, g.sigma_n, g.mu0).map_err(|e| ConfigError::new("gp", e.to_string()))?;
    let bounds = ShapeBounds::new(g.gamma_u, g.l_u).map_err(|e| ConfigError::new("gp", e.to_string()))?;
    let gibbs = GibbsSettings { burn_in: g.burn_in, n_samples: g.n_samples };
    let mut gp_models = Vec::with_capacity(m_dev);
    for (m, us) in users.iter().enumerate() {
        let iv = intervals[m];
        let mut row = Vec::with_capacity(us.len());
        for (n, u) in us.iter().enumerate() {
            let id = user_ids[m][n];
            let mut model =
                GpModel::with_grid(params, bounds, iv.lo, iv.hi, g.q).map_err(|e| ConfigError::new("gp", e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, Stream::Prior));
            rng.set_stream(id as u64);
            for _ in 0..g.prior_points {
                let x = iv.lo + iv.width() * rng.random::<f64>();
                let e: f64 = StandardNormal.sample(&mut rng);
                model.add_feedback(x, true_cost(u, x) + u.feedback_noise_std * e);
            }
            model
                .refresh_curvature(gibbs_seed(config.seed, id, 0), &gibbs)
                .map_err(|e| ConfigError::new(format!("users[{id}]"), format!("prior fit failed: {e}")))?;
            row.push(model);
        }
        gp_models.push(row);
    }
    let delta = intervals.iter().map(|i| g.delta_frac * i.width()).collect();
    Ok(Scenario {
        config: config.clone(),
        topology,
        plant,
        constraint,
        sets,
        users,
        user_ids,
        gp_models,
        delta,
        gibbs,
        n_steps,
    })
}

/// Seed for the Gibbs run of user `id` after its feedback at step `t`.
pub(crate) fn gibbs_seed(seed: u64, id: usize, t: usize) -> u64 {
    derive_seed(seed, Stream::Gibbs) ^ ((id as u64) << 40) ^ t as u64
}

pub(crate) fn measurement_seed(seed: u64) -> u64 {
    derive_seed(seed, Stream::Measurement)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_hand_value() {
        let mut u = ScenarioConfig::default().users[0].clone();
        u.quad_a = 1.0;
        u.preferred = Some(3.0);
        assert_eq!(true_cost(&u, 5.0), 4.0);
        assert_eq!(true_cost(&u, 3.0), 0.0);
    }

    #[test]
    fn linear_term_folds_into_vertex() {
        let mut u = ScenarioConfig::default().users[0].clone();
        u.quad_a = 2.0;
        u.preferred = None;
        u.quad_b = Some(-4.0);
        u.quad_c = 1.0;
        for x in [-1.0, 0.0, 2.5] {
            assert!((true_cost(&u, x) - (2.0 * x * x - 4.0 * x + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_every_half_hour() {
        let mut u = ScenarioConfig::default().users[0].clone();
        u.feedback_phase_s = Some(0.0);
        let steps: Vec<usize> = (0..1500).filter(|&t| feedback_due(&u, 0, t as f64 * 5.0, 5.0)).collect();
        assert_eq!(steps, vec![0, 360, 720, 1080, 1440]);
    }

    #[test]
    fn default_horizon() {
        assert_eq!(ScenarioConfig::default().n_steps(), 8640);
    }
}
