//! Projected online primal-dual iteration.
//!
//! [`pd_step`] is the measurement-based update: the device step sees only the
//! measured output (through `∇C(ŷ)` and `C(ŷ)`), users see only their own
//! gradient estimate and consensus dual. [`model_based_step`] is the same
//! iteration written in stacked form against the plant model; with noiseless
//! measurements both produce the same trajectory. [`solve_instance_oracle`]
//! computes the per-step optimum used by the regret metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{NetworkError, Plant, Topology, TrackingConstraint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("interval lower bound {lo} exceeds upper bound {hi}")]
    BadInterval { lo: f64, hi: f64 },
    #[error("oracle did not converge (residual {residual:e})")]
    NoConvergence { residual: f64, last: Vec<f64> },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self, SolverError> {
        if !(lo <= hi) {
            return Err(SolverError::BadInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Per-device feasible set, constant or given per step (the last entry is held).
#[derive(Clone, Debug, PartialEq)]
pub enum IntervalSeries {
    Constant(Interval),
    PerStep(Vec<Interval>),
}

impl IntervalSeries {
    pub fn at(&self, t: usize) -> Interval {
        match self {
            IntervalSeries::Constant(i) => *i,
            IntervalSeries::PerStep(v) => v[t.min(v.len() - 1)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSets {
    pub x_intervals: Vec<IntervalSeries>,
    /// `B_ν`: ν is kept in `[0, nu_cap]`.
    pub nu_cap: f64,
    /// `B_λ`: the stacked λ is kept in the 2-norm ball of this radius.
    pub lambda_radius: f64,
}

/// Quadratic cost `a (x − preferred)² + c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub a: f64,
    pub preferred: f64,
    pub c: f64,
}

impl Quadratic {
    pub fn value(&self, x: f64) -> f64 {
        let d = x - self.preferred;
        self.a * d * d + self.c
    }

    pub fn gradient(&self, x: f64) -> f64 {
        2.0 * self.a * (x - self.preferred)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    pub x_dev: Vec<f64>,
    pub x_user: Vec<Vec<f64>>,
    pub nu: f64,
    /// Consensus duals stacked edge by edge, device-major.
    pub lambda: Vec<f64>,
    pub alpha: f64,
}

impl SolverState {
    /// Zero duals, the given primal point.
    pub fn new(x_dev: Vec<f64>, x_user: Vec<Vec<f64>>, alpha: f64) -> Self {
        let n: usize = x_user.iter().map(|u| u.len()).sum();
        Self { x_dev, x_user, nu: 0.0, lambda: vec![0.0; n], alpha }
    }

    pub fn lambda_norm(&self) -> f64 {
        self.lambda.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn project_interval(v: f64, lo: f64, hi: f64) -> Result<f64, SolverError> {
    if !(lo <= hi) {
        return Err(SolverError::BadInterval { lo, hi });
    }
    Ok(v.clamp(lo, hi))
}

/// Projection onto the closed 2-norm ball of the given radius.
pub fn project_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n <= radius {
        v.to_vec()
    } else {
        v.iter().map(|x| x * radius / n).collect()
    }
}

pub fn primal_device_step(
    state: &SolverState,
    m: usize,
    a_col: &[f64],
    grad_c: &[f64],
    lambda_row_sum: f64,
    set: Interval,
) -> Result<f64, SolverError> {
    let drive: f64 = a_col.iter().zip(grad_c).map(|(a, g)| a * g).sum();
    let v = state.x_dev[m] - state.alpha * (state.nu * drive + lambda_row_sum);
    project_interval(v, set.lo, set.hi)
}

pub fn primal_user_step(
    state: &SolverState,
    m: usize,
    n: usize,
    g_mn: f64,
    lambda_mn: f64,
    set: Interval,
) -> Result<f64, SolverError> {
    let v = state.x_user[m][n] - state.alpha * (g_mn - lambda_mn);
    project_interval(v, set.lo, set.hi)
}

pub fn dual_nu_step(state: &SolverState, c_val: f64, cap: f64) -> f64 {
    (state.nu + state.alpha * c_val).clamp(0.0, cap)
}

pub fn dual_lambda_step(state: &SolverState, topology: &Topology, radius: f64) -> Vec<f64> {
    let mut next = Vec::with_capacity(state.lambda.len());
    let mut k = 0;
    for (m, users) in state.x_user.iter().enumerate() {
        for xu in users {
            next.push(state.lambda[k] + state.alpha * (state.x_dev[m] - xu));
            k += 1;
        }
    }
    debug_assert_eq!(k, topology.n_users());
    project_ball(&next, radius)
}

/// Everything the measurement-based step consumes at time `t`.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs<'a> {
    pub t: usize,
    /// `A^t`, outputs × devices.
    pub a_matrix: &'a DMatrix<f64>,
    /// `∇C^t` evaluated at the measurement.
    pub grad_c: &'a [f64],
    /// `C^t` evaluated at the measurement.
    pub c_val: f64,
    /// Gradient estimate (or true gradient) of each user at its own copy.
    pub user_grads: &'a [Vec<f64>],
    /// Devices whose primal value is updated this step; others are held.
    pub device_active: &'a [bool],
}

fn check_state(state: &SolverState, topology: &Topology, user_grads: &[Vec<f64>], active: &[bool]) -> Result<(), SolverError> {
    topology.check_shape(&state.x_dev, &state.x_user)?;
    topology.check_shape(&state.x_dev, user_grads)?;
    if state.lambda.len() != topology.n_users() || active.len() != topology.n_devices() {
        return Err(SolverError::DimensionMismatch("lambda or activity mask does not match the topology".into()));
    }
    Ok(())
}

/// One Jacobi step: every right-hand side reads the time-`t` state.
pub fn pd_step(
    state: &SolverState,
    topology: &Topology,
    sets: &ProjectionSets,
    inputs: &StepInputs<'_>,
) -> Result<SolverState, SolverError> {
    check_state(state, topology, inputs.user_grads, inputs.device_active)?;
    if inputs.a_matrix.ncols() != topology.n_devices() || inputs.a_matrix.nrows() != inputs.grad_c.len() {
        return Err(SolverError::DimensionMismatch("A or ∇C does not match the topology".into()));
    }
    let mut x_dev = state.x_dev.clone();
    let mut x_user = state.x_user.clone();
    let mut k = 0;
    for (m, &n_m) in topology.device_users().iter().enumerate() {
        let set = sets.x_intervals[m].at(inputs.t);
        let lam = &state.lambda[k..k + n_m];
        if inputs.device_active[m] {
            let a_col: Vec<f64> = inputs.a_matrix.column(m).iter().copied().collect();
            let row_sum: f64 = lam.iter().sum();
            x_dev[m] = primal_device_step(state, m, &a_col, inputs.grad_c, row_sum, set)?;
        }
        for n in 0..n_m {
            x_user[m][n] = primal_user_step(state, m, n, inputs.user_grads[m][n], lam[n], set)?;
        }
        k += n_m;
    }
    Ok(SolverState {
        x_dev,
        x_user,
        nu: dual_nu_step(state, inputs.c_val, sets.nu_cap),
        lambda: dual_lambda_step(state, topology, sets.lambda_radius),
        alpha: state.alpha,
    })
}

/// The same iteration in stacked form, driven by the exact model output
/// `y = A x_in + B w` instead of a measurement:
/// `x ← P_X(x − α(∇f + ν ∇ₓC + Dᵀλ))`, `ν ← P(ν + α C)`, `λ ← P(λ + α D x)`.
#[allow(clippy::too_many_arguments)]
pub fn model_based_step(
    state: &SolverState,
    topology: &Topology,
    sets: &ProjectionSets,
    plant: &Plant,
    constraint: &TrackingConstraint,
    t: usize,
    user_grads: &[Vec<f64>],
    device_active: &[bool],
) -> Result<SolverState, SolverError> {
    check_state(state, topology, user_grads, device_active)?;
    if plant.n_outputs() != 1 {
        return Err(SolverError::DimensionMismatch("tracking constraint needs a scalar output".into()));
    }
    let y = plant.model_output(t, &state.x_dev)?[0];
    let dc = constraint.constraint_gradient(t, y)?;
    let c = constraint.constraint_value(t, y)?;
    let a = plant.a_at(t)?;

    let d = topology.matrix();
    let x = topology.stack(&state.x_dev, &state.x_user)?;
    let lam = DVector::from_column_slice(&state.lambda);
    let mut grad = d.tr_mul(&lam);
    let mut k = 0;
    for (m, &n_m) in topology.device_users().iter().enumerate() {
        grad[k] += state.nu * (a[(0, m)] * dc);
        for n in 0..n_m {
            grad[k + 1 + n] += user_grads[m][n];
        }
        k += n_m + 1;
    }
    let mut x_next = &x - state.alpha * grad;
    let mut k = 0;
    for (m, &n_m) in topology.device_users().iter().enumerate() {
        let set = sets.x_intervals[m].at(t);
        x_next[k] = if device_active[m] { project_interval(x_next[k], set.lo, set.hi)? } else { x[k] };
        for n in 0..n_m {
            x_next[k + 1 + n] = project_interval(x_next[k + 1 + n], set.lo, set.hi)?;
        }
        k += n_m + 1;
    }
    let lam_next = lam + state.alpha * (d * &x);
    let (x_dev, x_user) = topology.unstack(&x_next)?;
    Ok(SolverState {
        x_dev,
        x_user,
        nu: (state.nu + state.alpha * c).clamp(0.0, sets.nu_cap),
        lambda: project_ball(lam_next.as_slice(), sets.lambda_radius),
        alpha: state.alpha,
    })
}

/// Coupling constraint `(β/2)(Σ_m a_m x_m + offset − y_ref)² ≤ ζ` frozen at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenConstraint {
    pub a_row: Vec<f64>,
    pub offset: f64,
    pub y_ref: f64,
    pub beta: f64,
    pub zeta: f64,
}

/// One time step of the network problem with the true costs.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenProblem {
    pub device_costs: Vec<Vec<Quadratic>>,
    pub intervals: Vec<Interval>,
    pub constraint: Option<FrozenConstraint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSolution {
    /// Consensus optimum per device; every user copy equals its device value.
    pub x_dev: Vec<f64>,
    /// Multiplier of the coupling constraint.
    pub nu: f64,
    /// Max of primal infeasibility and complementary-slackness violation.
    pub residual: f64,
    pub iterations: usize,
}

/// Exact optimum of a frozen instance.
///
/// At consensus the problem separates per device into `A_m (x_m − P_m)²` with
/// `A_m = Σ_n a_{m,n}` and `P_m` the curvature-weighted mean of the preferred
/// points, under one two-sided linear constraint `|y − y_ref| ≤ ρ`,
/// `ρ = √(2ζ/β)`. For a signed multiplier `μ` on `y` the minimizer is
/// `x_m(μ) = clamp(P_m − μ a_m / (2 A_m))`, and `y(μ)` is nonincreasing, so the
/// KKT point is found by bisection on `μ`. The multiplier of the original
/// quadratic constraint is `ν = μ / (β (y − y_ref))`.
pub fn solve_instance_oracle(problem: &FrozenProblem, tol: f64, max_iter: usize) -> Result<OracleSolution, SolverError> {
    let m_dev = problem.device_costs.len();
    if problem.intervals.len() != m_dev {
        return Err(SolverError::DimensionMismatch("one interval per device required".into()));
    }
    let mut curv = Vec::with_capacity(m_dev);
    let mut pref = Vec::with_capacity(m_dev);
    for costs in &problem.device_costs {
        let a: f64 = costs.iter().map(|q| q.a).sum();
        if !(a > 0.0) {
            return Err(SolverError::DimensionMismatch("each device needs positive total curvature".into()));
        }
        curv.push(a);
        pref.push(costs.iter().map(|q| q.a * q.preferred).sum::<f64>() / a);
    }
    let x_of = |mu: f64, a_row: &[f64]| -> Vec<f64> {
        (0..m_dev)
            .map(|m| {
                let iv = problem.intervals[m];
                (pref[m] - mu * a_row[m] / (2.0 * curv[m])).clamp(iv.lo, iv.hi)
            })
            .collect()
    };
    let Some(c) = &problem.constraint else {
        return Ok(OracleSolution { x_dev: x_of(0.0, &vec![0.0; m_dev]), nu: 0.0, residual: 0.0, iterations: 0 });
    };
    if c.a_row.len() != m_dev {
        return Err(SolverError::DimensionMismatch("constraint row must have one entry per device".into()));
    }
    let y_of = |x: &[f64]| x.iter().zip(&c.a_row).map(|(x, a)| a * x).sum::<f64>() + c.offset;
    let c_of = |y: f64| 0.5 * c.beta * (y - c.y_ref).powi(2) - c.zeta;
    let rho = (2.0 * c.zeta / c.beta).sqrt();

    let x0 = x_of(0.0, &c.a_row);
    let y0 = y_of(&x0);
    let (target, sign) = if y0 > c.y_ref + rho {
        (c.y_ref + rho, 1.0)
    } else if y0 < c.y_ref - rho {
        (c.y_ref - rho, -1.0)
    } else {
        return Ok(OracleSolution { residual: c_of(y0).max(0.0), x_dev: x0, nu: 0.0, iterations: 0 });
    };

    // Beyond this |μ| every device with a_m ≠ 0 sits on the bound that pushes y toward the target.
    let mu_sat = (0..m_dev)
        .filter(|&m| c.a_row[m] != 0.0)
        .map(|m| 2.0 * curv[m] * (problem.intervals[m].width() + (pref[m] - problem.intervals[m].midpoint()).abs()) / c.a_row[m].abs())
        .fold(0.0, f64::max)
        + 1.0;
    // `gap(μ) > 0` means μ is still too small.
    let gap = |mu: f64| sign * (y_of(&x_of(sign * mu, &c.a_row)) - target);
    if gap(mu_sat) > 0.0 {
        let last = x_of(sign * mu_sat, &c.a_row);
        return Err(SolverError::NoConvergence { residual: c_of(y_of(&last)), last });
    }
    let (mut lo, mut hi) = (0.0, mu_sat);
    let mut iterations = 0;
    while iterations < max_iter && hi - lo > f64::EPSILON * hi {
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    // `hi` is on the feasible side.
    let x = x_of(sign * hi, &c.a_row);
    let y = y_of(&x);
    let nu = sign * hi / (c.beta * (y - c.y_ref));
    let cv = c_of(y);
    let residual = cv.max(0.0).max((nu * cv).abs());
    if residual > tol || !nu.is_finite() {
        return Err(SolverError::NoConvergence { residual, last: x });
    }
    Ok(OracleSolution { x_dev: x, nu, residual, iterations })
}
