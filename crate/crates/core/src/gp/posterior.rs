//! GP posteriors: plain regression, the curvature posterior at the enforcement
//! points and the curvature-conditioned mean used as cost surrogate.

use nalgebra::{DMatrix, DVector};

use super::kernel::{deriv_cov_02, deriv_cov_22, se_kernel, KernelParams};
use super::{GpError, GpModel};
use crate::linalg::{self, Factor};

fn gram(xs: &[f64], params: &KernelParams) -> DMatrix<f64> {
    let n = xs.len();
    let noise = params.sigma_n * params.sigma_n;
    DMatrix::from_fn(n, n, |i, j| se_kernel(xs[i], xs[j], params) + if i == j { noise } else { 0.0 })
}

/// `K^{20}(s, x_p)`: rows are enforcement points, columns data points.
fn cross_20(s: &[f64], xs: &[f64], params: &KernelParams) -> DMatrix<f64> {
    DMatrix::from_fn(s.len(), xs.len(), |i, j| deriv_cov_02(s[i], xs[j], params))
}

fn curv_gram(s: &[f64], params: &KernelParams) -> DMatrix<f64> {
    DMatrix::from_fn(s.len(), s.len(), |i, j| deriv_cov_22(s[i], s[j], params))
}

fn residuals(model: &GpModel) -> DVector<f64> {
    DVector::from_iterator(model.data.len(), model.data.values.iter().map(|z| z - model.params.mu0))
}

/// Unconstrained posterior mean and variance of `U(x_star)`.
///
/// With no data the prior `(mu0, sigma_f^2)` is returned.
pub fn gp_posterior(model: &GpModel, x_star: f64) -> Result<(f64, f64), GpError> {
    let p = &model.params;
    if model.data.is_empty() {
        return Ok((p.mu0, p.sigma_f * p.sigma_f));
    }
    let xs = &model.data.points;
    let factor = linalg::factorize(&gram(xs, p)).ok_or(GpError::SingularKernel)?;
    let k = DVector::from_iterator(xs.len(), xs.iter().map(|x| se_kernel(*x, x_star, p)));
    let alpha = factor.solve_vec(&residuals(model));
    let mean = p.mu0 + k.dot(&alpha);
    let var = se_kernel(x_star, x_star, p) - k.dot(&factor.solve_vec(&k));
    Ok((mean, var.max(0.0)))
}

/// Posterior mean and covariance of the second derivatives at the enforcement
/// points given the feedback, before truncation.
pub fn second_deriv_posterior(model: &GpModel) -> Result<(DVector<f64>, DMatrix<f64>), GpError> {
    if model.data.is_empty() {
        return Err(GpError::NoData);
    }
    let p = &model.params;
    let xs = &model.data.points;
    let s = &model.enforcement;
    let factor = linalg::factorize(&gram(xs, p)).ok_or(GpError::SingularKernel)?;
    let k20 = cross_20(s, xs, p);
    let mean = &k20 * factor.solve_vec(&residuals(model));
    let cov = curv_gram(s, p) - &k20 * factor.solve_mat(&k20.transpose());
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok((mean, cov))
}

/// Which surrogate to build from a [`GpModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurrogateKind {
    /// Mean conditioned on `u2_estimate` at the enforcement points.
    ShapeConstrained,
    /// Plain GP posterior mean.
    Plain,
}

#[derive(Clone, Debug)]
enum Repr {
    Prior,
    Plain { xs: Vec<f64>, alpha: DVector<f64>, gram: Factor },
    Constrained(Box<Constrained>),
}

#[derive(Clone, Debug)]
struct Constrained {
    xs: Vec<f64>,
    s: Vec<f64>,
    /// Weights on `k(x, x_p)`.
    v: DVector<f64>,
    /// Weights on `k^{02}(s, x)`.
    w: DVector<f64>,
    curv: Factor,
    /// Factor of `B_1 = sigma^2 I + K - K02 K22^-1 K20`.
    b1: Factor,
    k20: DMatrix<f64>,
}

/// A fitted cost surrogate `x -> U_hat(x)`; cheap to evaluate.
#[derive(Clone, Debug)]
pub struct Surrogate {
    params: KernelParams,
    repr: Repr,
}

impl Surrogate {
    pub fn fit(model: &GpModel, kind: SurrogateKind) -> Result<Self, GpError> {
        let params = model.params;
        if model.data.is_empty() {
            return Ok(Self { params, repr: Repr::Prior });
        }
        let xs = model.data.points.clone();
        let r = residuals(model);
        if kind == SurrogateKind::Plain || model.enforcement.is_empty() {
            let gram = linalg::factorize(&gram(&xs, &params)).ok_or(GpError::SingularKernel)?;
            let alpha = gram.solve_vec(&r);
            return Ok(Self { params, repr: Repr::Plain { xs, alpha, gram } });
        }
        if model.u2_estimate.len() != model.enforcement.len() {
            return Err(GpError::DimensionMismatch(format!(
                "{} enforcement points but {} curvature estimates",
                model.enforcement.len(),
                model.u2_estimate.len()
            )));
        }
        let s = model.enforcement.clone();
        let u2 = DVector::from_column_slice(&model.u2_estimate);
        let curv = linalg::factorize(&curv_gram(&s, &params)).ok_or(GpError::SingularKernel)?;
        let k20 = cross_20(&s, &xs, &params);
        // A1^T = K22^-1 K20  (q x p)
        let a1t = curv.solve_mat(&k20);
        let b1 = gram(&xs, &params) - k20.transpose() * &a1t;
        let b1 = (&b1 + b1.transpose()) * 0.5;
        let b1 = linalg::factorize(&b1).ok_or(GpError::SingularKernel)?;
        let v = b1.solve_vec(&(r - a1t.transpose() * &u2));
        let w = curv.solve_vec(&(u2 - &k20 * &v));
        Ok(Self { params, repr: Repr::Constrained(Box::new(Constrained { xs, s, v, w, curv, b1, k20 })) })
    }

    /// Surrogate value at `x`.
    pub fn value(&self, x: f64) -> f64 {
        let p = &self.params;
        match &self.repr {
            Repr::Prior => p.mu0,
            Repr::Plain { xs, alpha, .. } => {
                p.mu0 + xs.iter().zip(alpha.iter()).map(|(xi, a)| se_kernel(*xi, x, p) * a).sum::<f64>()
            }
            Repr::Constrained(c) => {
                let data: f64 = c.xs.iter().zip(c.v.iter()).map(|(xi, v)| se_kernel(*xi, x, p) * v).sum();
                let curv: f64 = c.s.iter().zip(c.w.iter()).map(|(si, w)| deriv_cov_02(*si, x, p) * w).sum();
                p.mu0 + data + curv
            }
        }
    }

    /// Posterior standard deviation at `x` (prior, plain, or curvature-conditioned).
    pub fn std_dev(&self, x: f64) -> f64 {
        let p = &self.params;
        let var = match &self.repr {
            Repr::Prior => p.sigma_f * p.sigma_f,
            Repr::Plain { xs, gram, .. } => {
                let k = DVector::from_iterator(xs.len(), xs.iter().map(|xi| se_kernel(*xi, x, p)));
                se_kernel(x, x, p) - k.dot(&gram.solve_vec(&k))
            }
            Repr::Constrained(c) => {
                let k02 = DVector::from_iterator(c.s.len(), c.s.iter().map(|si| deriv_cov_02(*si, x, p)));
                let k22_inv_k02 = c.curv.solve_vec(&k02);
                let b2 = se_kernel(x, x, p) - k02.dot(&k22_inv_k02);
                let kx = DVector::from_iterator(c.xs.len(), c.xs.iter().map(|xi| se_kernel(*xi, x, p)));
                let b3 = kx - c.k20.transpose() * k22_inv_k02;
                b2 - b3.dot(&c.b1.solve_vec(&b3))
            }
        };
        var.max(0.0).sqrt()
    }

    /// Central finite-difference gradient of the surrogate; see [`central_difference`].
    pub fn gradient(&self, x: f64, delta: f64, lo: f64, hi: f64) -> Result<f64, GpError> {
        if let Repr::Prior = self.repr {
            if !(delta > 0.0) {
                return Err(GpError::InvalidParams(format!("delta must be > 0, got {delta}")));
            }
            return Ok(0.0);
        }
        central_difference(|v| self.value(v), x, delta, lo, hi)
    }

    pub fn is_prior(&self) -> bool {
        matches!(self.repr, Repr::Prior)
    }

    /// Largest diagonal jitter that any factorization of this fit needed.
    pub fn jitter(&self) -> f64 {
        match &self.repr {
            Repr::Prior => 0.0,
            Repr::Plain { gram, .. } => gram.jitter,
            Repr::Constrained(c) => c.curv.jitter.max(c.b1.jitter),
        }
    }
}

/// `(f(x + δ/2) − f(x − δ/2)) / δ`. When the stencil leaves `[lo, hi]` it is
/// shifted inside keeping its width; intervals narrower than `δ` use the centred stencil.
pub fn central_difference<F: Fn(f64) -> f64>(f: F, x: f64, delta: f64, lo: f64, hi: f64) -> Result<f64, GpError> {
    if !(delta > 0.0) {
        return Err(GpError::InvalidParams(format!("delta must be > 0, got {delta}")));
    }
    let (mut left, mut right) = (x - 0.5 * delta, x + 0.5 * delta);
    if hi - lo >= delta {
        if left < lo {
            left = lo;
            right = lo + delta;
        } else if right > hi {
            right = hi;
            left = hi - delta;
        }
    }
    Ok((f(right) - f(left)) / (right - left))
}

/// Curvature-conditioned posterior mean and standard deviation at `x_star`.
pub fn constrained_posterior_mean(model: &GpModel, x_star: f64) -> Result<(f64, f64), GpError> {
    let s = Surrogate::fit(model, SurrogateKind::ShapeConstrained)?;
    Ok((s.value(x_star), s.std_dev(x_star)))
}

/// Finite-difference gradient of the shape-constrained surrogate at `x`.
pub fn estimate_gradient(model: &GpModel, x: f64, delta: f64, lo: f64, hi: f64) -> Result<f64, GpError> {
    Surrogate::fit(model, SurrogateKind::ShapeConstrained)?.gradient(x, delta, lo, hi)
}
