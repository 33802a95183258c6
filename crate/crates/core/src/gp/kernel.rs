//! Squared-exponential kernel and the covariances of its second-derivative process.

use serde::{Deserialize, Serialize};

use super::GpError;

/// Hyperparameters of the squared-exponential prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Signal standard deviation (cost units).
    pub sigma_f: f64,
    /// Characteristic length scale (input units).
    pub ell: f64,
    /// Observation noise standard deviation (cost units).
    pub sigma_n: f64,
    /// Constant prior mean (cost units).
    pub mu0: f64,
}

impl KernelParams {
    pub fn new(sigma_f: f64, ell: f64, sigma_n: f64, mu0: f64) -> Result<Self, GpError> {
        let p = Self { sigma_f, ell, sigma_n, mu0 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.sigma_f > 0.0) || !self.sigma_f.is_finite() {
            return Err(GpError::InvalidParams(format!("sigma_f must be > 0, got {}", self.sigma_f)));
        }
        if !(self.ell > 0.0) || !self.ell.is_finite() {
            return Err(GpError::InvalidParams(format!("ell must be > 0, got {}", self.ell)));
        }
        if !(self.sigma_n >= 0.0) || !self.sigma_n.is_finite() {
            return Err(GpError::InvalidParams(format!("sigma_n must be >= 0, got {}", self.sigma_n)));
        }
        if !self.mu0.is_finite() {
            return Err(GpError::InvalidParams("mu0 must be finite".into()));
        }
        Ok(())
    }

    pub(crate) fn signal_var(&self) -> f64 {
        self.sigma_f * self.sigma_f
    }
}

impl Default for KernelParams {
    fn default() -> Self {
        Self { sigma_f: 1.0, ell: 10.0, sigma_n: 1.5, mu0: 0.0 }
    }
}

/// `k(x, x') = sigma_f^2 exp(-(x - x')^2 / (2 ell^2))`.
pub fn se_kernel(x: f64, x2: f64, params: &KernelParams) -> f64 {
    let r = x - x2;
    params.signal_var() * (-0.5 * r * r / (params.ell * params.ell)).exp()
}

/// Covariance between `U''(x)` and `U''(x')`: the fourth mixed derivative of the kernel.
pub fn deriv_cov_22(x: f64, x2: f64, params: &KernelParams) -> f64 {
    let r = x - x2;
    let l2 = params.ell * params.ell;
    let r2 = r * r;
    let poly = r2 * r2 / (l2 * l2) - 6.0 * r2 / l2 + 3.0;
    params.signal_var() * (-0.5 * r2 / l2).exp() * poly / (l2 * l2)
}

/// Covariance between `U''(x_deriv)` and `U(x_val)`.
pub fn deriv_cov_02(x_deriv: f64, x_val: f64, params: &KernelParams) -> f64 {
    let r = x_deriv - x_val;
    let l2 = params.ell * params.ell;
    let r2 = r * r;
    params.signal_var() * (-0.5 * r2 / l2).exp() * (r2 / (l2 * l2) - 1.0 / l2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit(ell: f64) -> KernelParams {
        KernelParams { sigma_f: 1.0, ell, sigma_n: 0.1, mu0: 0.0 }
    }

    #[test]
    fn se_diagonal_and_one_length_scale() {
        let p = unit(10.0);
        assert_eq!(se_kernel(0.0, 0.0, &p), 1.0);
        assert_relative_eq!(se_kernel(0.0, 10.0, &p), (-0.5f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(se_kernel(0.0, 10.0, &p), 0.60653, epsilon = 1e-5);
        assert_eq!(se_kernel(1.3, -2.0, &p), se_kernel(-2.0, 1.3, &p));
    }

    #[test]
    fn second_derivative_covariances_closed_forms() {
        let p = KernelParams { sigma_f: 2.0, ell: 3.0, sigma_n: 0.0, mu0: 0.0 };
        assert_relative_eq!(deriv_cov_22(1.0, 1.0, &p), 3.0 * 4.0 / 81.0, max_relative = 1e-15);
        assert_relative_eq!(deriv_cov_02(1.0, 1.0, &p), -4.0 / 9.0, max_relative = 1e-15);

        let p = unit(1.0);
        assert_relative_eq!(deriv_cov_22(0.0, 1.0, &p), -2.0 * (-0.5f64).exp(), max_relative = 1e-14);
        assert_relative_eq!(deriv_cov_22(0.0, 1.0, &p), -1.21306, epsilon = 1e-5);
        assert_eq!(deriv_cov_02(0.0, 1.0, &p), 0.0);
        assert_eq!(deriv_cov_22(0.5, -1.0, &p), deriv_cov_22(-1.0, 0.5, &p));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(KernelParams::new(0.0, 1.0, 0.1, 0.0).is_err());
        assert!(KernelParams::new(1.0, -1.0, 0.1, 0.0).is_err());
        assert!(KernelParams::new(1.0, 1.0, -0.1, 0.0).is_err());
        assert!(KernelParams::new(1.0, 1.0, 0.0, 0.0).is_ok());
    }
}
