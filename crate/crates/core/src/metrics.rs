//! Regret, path lengths, gradient errors, constraint violation and the
//! theoretical bound curves, all computed as folds over [`StepRecord`]s.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::Scenario;
use crate::solver::Quadratic;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no oracle solution recorded at step {t}")]
    MissingOracle { t: usize },
    #[error("record at step {t} does not match the cost table")]
    Shape { t: usize },
}

/// State and observations at one step, before the update is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x_dev: Vec<f64>,
    pub x_user: Vec<Vec<f64>>,
    pub nu: f64,
    pub lambda: Vec<f64>,
    /// Measured output fed to the solver.
    pub y_hat: f64,
    /// Noiseless output `y^t(x^t)`.
    pub y: f64,
    pub y_ref: f64,
    /// `C^t(y^t(x^t))` on the noiseless output.
    pub c_val: f64,
    pub g_est: Vec<Vec<f64>>,
    pub g_true: Vec<Vec<f64>>,
    /// Per-device optimum of the frozen instance.
    pub x_star: Option<Vec<f64>>,
    /// False when `x_star` was held over from an earlier step.
    pub oracle_fresh: bool,
}

/// Append-only record stream of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<StepRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, r: StepRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn star(r: &StepRecord) -> Result<&[f64], MetricsError> {
    r.x_star.as_deref().ok_or(MetricsError::MissingOracle { t: r.t })
}

/// Per-step term of the regret of user copy `j` of device `m`:
/// `Σ_i U_{m,i}(x_{m,j}) − Σ_i U_{m,i}(x_m*)`.
fn user_term(r: &StepRecord, costs: &[Vec<Quadratic>], m: usize, j: usize) -> Result<f64, MetricsError> {
    let xs = star(r)?;
    let cs = costs.get(m).ok_or(MetricsError::Shape { t: r.t })?;
    let xj = *r.x_user.get(m).and_then(|u| u.get(j)).ok_or(MetricsError::Shape { t: r.t })?;
    let x_opt = *xs.get(m).ok_or(MetricsError::Shape { t: r.t })?;
    Ok(cs.iter().map(|q| q.value(xj)).sum::<f64>() - cs.iter().map(|q| q.value(x_opt)).sum::<f64>())
}

fn network_term(r: &StepRecord, costs: &[Vec<Quadratic>], m: usize) -> Result<f64, MetricsError> {
    let n = costs.get(m).map_or(0, Vec::len);
    let mut s = 0.0;
    for j in 0..n {
        s += user_term(r, costs, m, j)?;
    }
    Ok(s / n as f64)
}

/// Global regret contribution of one step.
pub fn regret_increment(r: &StepRecord, costs: &[Vec<Quadratic>]) -> Result<f64, MetricsError> {
    (0..costs.len()).map(|m| network_term(r, costs, m)).sum()
}

pub fn regret_user(records: &[StepRecord], costs: &[Vec<Quadratic>], m: usize, j: usize) -> Result<f64, MetricsError> {
    records.iter().map(|r| user_term(r, costs, m, j)).sum()
}

pub fn regret_network(records: &[StepRecord], costs: &[Vec<Quadratic>], m: usize) -> Result<f64, MetricsError> {
    records.iter().map(|r| network_term(r, costs, m)).sum()
}

pub fn regret_global(records: &[StepRecord], costs: &[Vec<Quadratic>]) -> Result<f64, MetricsError> {
    records.iter().map(|r| regret_increment(r, costs)).sum()
}

/// Squared distance between two stacked consensus points given per device;
/// device `m` occupies `1 + N_m` stacked coordinates.
fn stacked_sq_dist(a: &[f64], b: &[f64], users: &[usize]) -> f64 {
    a.iter().zip(b).zip(users).map(|((x, y), &n)| (1 + n) as f64 * (x - y).powi(2)).sum()
}

/// `(Φ, Υ)`: sums of `‖x^{t*} − x^{t+1*}‖` and its square over consecutive records.
pub fn path_lengths(records: &[StepRecord]) -> Result<(f64, f64), MetricsError> {
    let (mut phi, mut ups) = (0.0, 0.0);
    for w in records.windows(2) {
        let users: Vec<usize> = w[0].x_user.iter().map(Vec::len).collect();
        let d2 = stacked_sq_dist(star(&w[0])?, star(&w[1])?, &users);
        phi += d2.sqrt();
        ups += d2;
    }
    Ok((phi, ups))
}

fn error_sq(r: &StepRecord) -> f64 {
    r.g_est.iter().flatten().zip(r.g_true.iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum()
}

/// `(ξ, Ξ)`: sums of `‖e^t‖` and `‖e^t‖²` with `e^t = g_est − g_true` stacked over users.
/// `Ξ` is the empirical stand-in for the unobservable per-step error bound.
pub fn gradient_error_metrics(records: &[StepRecord]) -> (f64, f64) {
    records.iter().map(error_sq).fold((0.0, 0.0), |(xi, big), e2| (xi + e2.sqrt(), big + e2))
}

/// `Σ [C^t]^+`.
pub fn acv(records: &[StepRecord]) -> f64 {
    records.iter().map(|r| r.c_val.max(0.0)).sum()
}

/// `[Σ C^t]^+`.
pub fn fit(records: &[StepRecord]) -> f64 {
    records.iter().map(|r| r.c_val).sum::<f64>().max(0.0)
}

/// Problem constants entering the bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    /// Lipschitz constant of the stacked cost.
    pub l: f64,
    /// `sup ‖∇ₓC‖`.
    pub j: f64,
    /// `sup |C|`.
    pub h: f64,
    /// `sup ‖x‖`.
    pub b_x: f64,
    pub b_lambda: f64,
    pub b_nu: f64,
    pub omega: f64,
    /// Diameter of the stacked box.
    pub d_x: f64,
}

impl BoundConstants {
    pub fn gamma_x(&self) -> f64 {
        self.l + self.b_nu * self.j + self.omega * self.b_lambda
    }

    pub fn gamma_kappa(&self) -> f64 {
        self.omega.powi(2) * self.b_x.powi(2) + self.h.powi(2)
    }

    /// Constants of a total-power scenario. `J` and `H` take the worst case of
    /// `|y − y_ref|` over the box and every step.
    pub fn for_scenario(s: &Scenario) -> Self {
        let ivs = s.intervals();
        let users = s.topology.device_users();
        let (mut bx2, mut dx2) = (0.0, 0.0);
        for (iv, &n) in ivs.iter().zip(users) {
            let k = (1 + n) as f64;
            bx2 += k * iv.lo.abs().max(iv.hi.abs()).powi(2);
            dx2 += k * iv.width().powi(2);
        }
        let beta = s.constraint.beta();
        let (mut j, mut h) = (0.0f64, 0.0f64);
        for t in 0..s.n_steps {
            let a = s.plant.a_at(t).expect("t within horizon");
            let off = s.plant.offset(t).expect("t within horizon")[0];
            let (mut ylo, mut yhi) = (off, off);
            for (m, iv) in ivs.iter().enumerate() {
                let (p, q) = (a[(0, m)] * iv.lo, a[(0, m)] * iv.hi);
                ylo += p.min(q);
                yhi += p.max(q);
            }
            let r = s.constraint.y_ref(t).expect("t within horizon");
            let z = s.constraint.zeta(t).expect("t within horizon");
            let e = (ylo - r).abs().max((yhi - r).abs());
            j = j.max(beta * e * a.row(0).norm());
            h = h.max(z.max(0.5 * beta * e * e - z));
        }
        Self {
            l: s.lipschitz(),
            j,
            h,
            b_x: bx2.sqrt(),
            b_lambda: s.sets.lambda_radius,
            b_nu: s.sets.nu_cap,
            omega: s.topology.omega(),
            d_x: dx2.sqrt(),
        }
    }
}

/// Bound values after each prefix `T = 1..len` of the record stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCurves {
    pub regret: Vec<f64>,
    pub acv: Vec<f64>,
}

/// Regret and ACV bounds evaluated with empirical `Φ, Υ, ξ, Ξ`.
///
/// Regret: `(‖x¹−x¹*‖² + B_λ² + B_ν²)/2α + αT(Γ_x² + Γ_κ)/2 + R(T)` and
/// ACV: `T(D_x L + B_λ Ω B_x)/B_ν + R(T)/B_ν + T((4B_x² + B_ν²)/α + α(Γ_x² + H²)/2)/B_ν`,
/// with the shared drift/error part `R(T) = αΞ/2 + ξ(2B_x + αΓ_x) + Υ/2α + D_x Φ/α`.
pub fn bound_curves(records: &[StepRecord], k: &BoundConstants, alpha: f64) -> Result<BoundCurves, MetricsError> {
    let mut out = BoundCurves { regret: Vec::with_capacity(records.len()), acv: Vec::with_capacity(records.len()) };
    let Some(first) = records.first() else {
        return Ok(out);
    };
    let users: Vec<usize> = first.x_user.iter().map(Vec::len).collect();
    let xs1 = star(first)?;
    let mut d1 = 0.0;
    for (m, xs) in xs1.iter().enumerate() {
        d1 += (first.x_dev[m] - xs).powi(2);
        d1 += first.x_user[m].iter().map(|u| (u - xs).powi(2)).sum::<f64>();
    }
    let (gx, gk) = (k.gamma_x(), k.gamma_kappa());
    let (mut phi, mut ups, mut xi, mut big_xi) = (0.0, 0.0, 0.0, 0.0);
    for (i, r) in records.iter().enumerate() {
        if i > 0 {
            let d2 = stacked_sq_dist(star(&records[i - 1])?, star(r)?, &users);
            phi += d2.sqrt();
            ups += d2;
        }
        let e2 = error_sq(r);
        xi += e2.sqrt();
        big_xi += e2;
        let t = (i + 1) as f64;
        let drift = alpha / 2.0 * big_xi + xi * (2.0 * k.b_x + alpha * gx) + ups / (2.0 * alpha) + k.d_x * phi / alpha;
        out.regret.push(
            (d1 + k.b_lambda.powi(2) + k.b_nu.powi(2)) / (2.0 * alpha) + alpha / 2.0 * t * (gx * gx + gk) + drift,
        );
        out.acv.push(
            (t * (k.d_x * k.l + k.b_lambda * k.omega * k.b_x)
                + drift
                + t * ((4.0 * k.b_x.powi(2) + k.b_nu.powi(2)) / alpha + alpha / 2.0 * (gx * gx + k.h * k.h)))
                / k.b_nu,
        );
    }
    Ok(out)
}

/// Cumulative ACV, regret, ξ and Ξ maintained while a run streams records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningTotals {
    pub acv: f64,
    pub regret: f64,
    pub xi: f64,
    pub big_xi: f64,
}

impl RunningTotals {
    pub fn push(&mut self, r: &StepRecord, costs: &[Vec<Quadratic>]) -> Result<(), MetricsError> {
        self.regret += regret_increment(r, costs)?;
        self.acv += r.c_val.max(0.0);
        let e2 = error_sq(r);
        self.xi += e2.sqrt();
        self.big_xi += e2;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: usize, x: f64, xs: f64, c: f64) -> StepRecord {
        StepRecord {
            t,
            x_dev: vec![x],
            x_user: vec![vec![x]],
            nu: 0.0,
            lambda: vec![0.0],
            y_hat: 0.0,
            y: 0.0,
            y_ref: 0.0,
            c_val: c,
            g_est: vec![vec![0.0]],
            g_true: vec![vec![0.0]],
            x_star: Some(vec![xs]),
            oracle_fresh: true,
        }
    }

    #[test]
    fn constant_offset_regret() {
        let costs = vec![vec![Quadratic { a: 1.0, preferred: 3.0, c: 0.0 }]];
        let recs: Vec<_> = (0..10).map(|t| rec(t, 2.0, 3.0, 0.0)).collect();
        assert_eq!(regret_user(&recs, &costs, 0, 0).unwrap(), 10.0);
        assert_eq!(regret_global(&recs, &costs).unwrap(), 10.0);
    }

    #[test]
    fn acv_and_fit_hand_values() {
        let recs: Vec<_> = [-1.0, 2.0, -3.0].iter().enumerate().map(|(t, &c)| rec(t, 0.0, 0.0, c)).collect();
        assert_eq!(acv(&recs), 2.0);
        assert_eq!(fit(&recs), 0.0);
    }

    #[test]
    fn missing_oracle_reported() {
        let costs = vec![vec![Quadratic { a: 1.0, preferred: 3.0, c: 0.0 }]];
        let mut r = rec(4, 0.0, 0.0, 0.0);
        r.x_star = None;
        assert_eq!(regret_global(&[r], &costs), Err(MetricsError::MissingOracle { t: 4 }));
    }
}
