//! Shape-constrained Gaussian-process estimation of user cost functions.
//!
//! A [`GpModel`] collects noisy feedback `z_i = U(x_i) + eps_i` and a fixed grid
//! of enforcement points where the second derivative of `U` is constrained to
//! `[gamma_u, l_u]`. Fitting produces a [`Surrogate`]: either the prior, the plain
//! GP posterior mean, or the mean conditioned on the estimated curvatures.

mod kernel;
mod posterior;
mod truncnorm;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kernel::{deriv_cov_02, deriv_cov_22, se_kernel, KernelParams};
pub use posterior::{
    central_difference, constrained_posterior_mean, estimate_gradient, gp_posterior, second_deriv_posterior, Surrogate, SurrogateKind,
};
pub use truncnorm::{sample_truncated_normal, truncated_second_deriv_mean, GibbsSettings};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("kernel matrix is singular even after jitter escalation")]
    SingularKernel,
    #[error("truncation box has numerically zero mass")]
    DegenerateTruncation,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("operation needs at least one observation")]
    NoData,
}

/// Bounds on the second derivative of the estimated function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeBounds {
    pub gamma_u: f64,
    pub l_u: f64,
}

impl ShapeBounds {
    pub fn new(gamma_u: f64, l_u: f64) -> Result<Self, GpError> {
        let b = Self { gamma_u, l_u };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.gamma_u > 0.0 && self.gamma_u <= self.l_u && self.l_u.is_finite()) {
            return Err(GpError::InvalidParams(format!(
                "shape bounds need 0 < gamma_u <= l_u, got [{}, {}]",
                self.gamma_u, self.l_u
            )));
        }
        Ok(())
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.gamma_u, self.l_u)
    }
}

/// Feedback received from one user: sample inputs and noisy cost evaluations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSet {
    pub points: Vec<f64>,
    pub values: Vec<f64>,
}

impl FeedbackSet {
    pub fn push(&mut self, x: f64, z: f64) {
        self.points.push(x);
        self.values.push(z);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-user GP state. Serializes to the snapshot format written by the runner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub params: KernelParams,
    pub bounds: ShapeBounds,
    pub data: FeedbackSet,
    /// Enforcement points `s` for the curvature constraint.
    pub enforcement: Vec<f64>,
    /// Curvature values plugged into the constrained mean, one per enforcement point.
    pub u2_estimate: Vec<f64>,
}

impl GpModel {
    pub fn new(params: KernelParams, bounds: ShapeBounds, enforcement: Vec<f64>) -> Result<Self, GpError> {
        params.validate()?;
        bounds.validate()?;
        let u2_estimate = vec![bounds.clamp(0.0); enforcement.len()];
        Ok(Self { params, bounds, data: FeedbackSet::default(), enforcement, u2_estimate })
    }

    /// Model with `q` enforcement points evenly spaced over `[lo, hi]`, endpoints included.
    pub fn with_grid(params: KernelParams, bounds: ShapeBounds, lo: f64, hi: f64, q: usize) -> Result<Self, GpError> {
        if !(lo <= hi) {
            return Err(GpError::InvalidParams(format!("empty interval [{lo}, {hi}]")));
        }
        let grid = match q {
            0 => Vec::new(),
            1 => vec![0.5 * (lo + hi)],
            _ => (0..q).map(|i| lo + (hi - lo) * i as f64 / (q - 1) as f64).collect(),
        };
        Self::new(params, bounds, grid)
    }

    pub fn add_feedback(&mut self, x: f64, z: f64) {
        self.data.push(x, z);
    }

    /// Re-estimates `u2_estimate` as the truncated-normal mean of the curvature
    /// posterior. Falls back to clamping the untruncated mean into the bounds when
    /// the box carries no mass. Returns `true` when the fallback was used.
    pub fn refresh_curvature(&mut self, seed: u64, gibbs: &GibbsSettings) -> Result<bool, GpError> {
        if self.data.is_empty() || self.enforcement.is_empty() {
            return Ok(false);
        }
        let (mean, cov) = second_deriv_posterior(self)?;
        match truncated_second_deriv_mean(&mean, &cov, &self.bounds, seed, gibbs) {
            Ok(est) => {
                self.u2_estimate = est.iter().copied().collect();
                Ok(false)
            }
            Err(GpError::DegenerateTruncation) => {
                self.u2_estimate = mean.iter().map(|m| self.bounds.clamp(*m)).collect();
                Ok(true)
            }
            Err(e) => Err(e),
        }
    }

    /// Builds the surrogate of the requested kind from the current state.
    pub fn surrogate(&self, kind: SurrogateKind) -> Result<Surrogate, GpError> {
        Surrogate::fit(self, kind)
    }
}
