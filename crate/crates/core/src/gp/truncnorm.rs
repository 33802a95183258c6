//! Truncated normal sampling: a tail-robust univariate sampler and a
//! coordinate-wise Gibbs sampler for a multivariate normal restricted to a box.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use super::{GpError, ShapeBounds};

/// Standardized bound beyond which the normal mass is treated as zero.
const ZERO_MASS_Z: f64 = 37.5;
/// Below this threshold the inverse survival function is accurate enough.
const INVERSION_LIMIT: f64 = 4.0;
/// Eigenvalues of the covariance are floored at this fraction of the largest.
const EIGEN_FLOOR: f64 = 1e-12;
/// The chain starts this fraction of the box width inside each face.
const START_SLACK: f64 = 1e-3;

/// Burn-in and retained sweep counts for the Gibbs sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GibbsSettings {
    pub burn_in: usize,
    pub n_samples: usize,
}

impl Default for GibbsSettings {
    fn default() -> Self {
        Self { burn_in: 100, n_samples: 500 }
    }
}

fn std_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Standard normal restricted to `[a, b]` with `0 <= a < b`.
fn upper_tail<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if a < INVERSION_LIMIT {
        let qa = std_sf(a);
        let qb = std_sf(b);
        let u = qb + rng.random::<f64>() * (qa - qb);
        let x = std::f64::consts::SQRT_2 * erfc_inv(2.0 * u);
        return x.clamp(a, b);
    }
    if b - a < 1.0 / a {
        // narrow slab deep in the tail: uniform proposal
        loop {
            let x = a + rng.random::<f64>() * (b - a);
            if rng.random::<f64>() < (-(x * x - a * a) / 2.0).exp() {
                return x;
            }
        }
    }
    let rate = (a + (a * a + 4.0).sqrt()) / 2.0;
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let x = a + exp.sample(rng);
        if x > b {
            continue;
        }
        if rng.random::<f64>() < (-(x - rate) * (x - rate) / 2.0).exp() {
            return x;
        }
    }
}

/// Draws a standard normal restricted to `[a, b]`, `a < b`.
fn std_truncated<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if a >= 0.0 {
        upper_tail(a, b, rng)
    } else if b <= 0.0 {
        -upper_tail(-b, -a, rng)
    } else {
        let pa = std_cdf(a);
        let pb = std_cdf(b);
        let u = pa + rng.random::<f64>() * (pb - pa);
        (-std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)).clamp(a, b)
    }
}

/// Draws from `N(mean, sd^2)` restricted to `[lo, hi]`.
pub fn sample_truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    if !(sd > 0.0) || !sd.is_finite() || hi <= lo {
        return mean.clamp(lo, hi);
    }
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    (mean + sd * std_truncated(a, b, rng)).clamp(lo, hi)
}

/// Monte-Carlo mean of `N(mean, cov)` truncated to `[gamma_u, l_u]^q`,
/// estimated by coordinate-wise Gibbs sampling in whitened coordinates.
/// Deterministic for a fixed seed.
pub fn truncated_second_deriv_mean(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    bounds: &ShapeBounds,
    seed: u64,
    settings: &GibbsSettings,
) -> Result<DVector<f64>, GpError> {
    let q = mean.len();
    let (lo, hi) = (bounds.gamma_u, bounds.l_u);
    if cov.nrows() != q || cov.ncols() != q {
        return Err(GpError::DimensionMismatch(format!("mean has {q} entries, cov is {}x{}", cov.nrows(), cov.ncols())));
    }
    if settings.n_samples == 0 {
        return Err(GpError::InvalidParams("n_samples must be >= 1".into()));
    }
    if q == 0 {
        return Ok(DVector::zeros(0));
    }
    if !mean.iter().all(|m| m.is_finite()) {
        return Err(GpError::DegenerateTruncation);
    }

    // zero marginal mass in any coordinate means zero mass in the box
    for i in 0..q {
        let sd = cov[(i, i)].max(0.0).sqrt();
        if sd > 0.0 {
            let a = (lo - mean[i]) / sd;
            let b = (hi - mean[i]) / sd;
            if a > ZERO_MASS_Z || b < -ZERO_MASS_Z {
                return Err(GpError::DegenerateTruncation);
            }
        } else if mean[i] < lo || mean[i] > hi {
            return Err(GpError::DegenerateTruncation);
        }
    }

    let max_var = cov.diagonal().iter().cloned().fold(0.0, f64::max);
    if max_var <= f64::MIN_POSITIVE {
        return Ok(mean.map(|m| m.clamp(lo, hi)));
    }

    // Gibbs runs on whitened coordinates y with x = mean + W y, W = V sqrt(Lambda).
    // Each conditional of y_i is a standard normal cut to the interval where the
    // whole of x stays inside the box.
    let eig = cov.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.max();
    if !(lam_max > 0.0) || !lam_max.is_finite() {
        return Err(GpError::DegenerateTruncation);
    }
    let floor = lam_max * EIGEN_FLOOR;
    let sqrt_lam = eig.eigenvalues.map(|l| l.max(floor).sqrt());
    let mut whiten = eig.eigenvectors.clone();
    for (j, mut col) in whiten.column_iter_mut().enumerate() {
        col *= sqrt_lam[j];
    }

    // interior starting point
    let slack = START_SLACK * (hi - lo);
    let x0 = mean.map(|m| m.clamp(lo + slack, hi - slack));
    let mut y = DVector::from_fn(q, |j, _| eig.eigenvectors.column(j).dot(&(&x0 - mean)) / sqrt_lam[j]);
    let mut x = mean + &whiten * &y;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = DVector::zeros(q);
    for sweep in 0..settings.burn_in + settings.n_samples {
        for j in 0..q {
            // x = base + w_j y_j, base excludes coordinate j
            let (mut a, mut b) = (f64::NEG_INFINITY, f64::INFINITY);
            for k in 0..q {
                let w = whiten[(k, j)];
                if w.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let base = x[k] - w * y[j];
                let (t1, t2) = ((lo - base) / w, (hi - base) / w);
                let (l, u) = if w > 0.0 { (t1, t2) } else { (t2, t1) };
                a = a.max(l);
                b = b.min(u);
            }
            if !(a <= b) {
                // rounding can pinch a pinned direction; keep it where it is
                if (a - b).abs() <= 1e-9 * (1.0 + a.abs()) {
                    continue;
                }
                return Err(GpError::DegenerateTruncation);
            }
            let yj = if b - a <= f64::EPSILON * (1.0 + a.abs()) { 0.5 * (a + b) } else { std_truncated(a, b, &mut rng) };
            let dy = yj - y[j];
            y[j] = yj;
            x.axpy(dy, &whiten.column(j), 1.0);
        }
        if sweep >= settings.burn_in {
            acc += &x;
        }
    }
    Ok((acc / settings.n_samples as f64).map(|v| v.clamp(lo, hi)))
}
