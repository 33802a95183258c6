//! Star-graph consensus topology, the linear plant map and the tracking constraint.
//!
//! Stacked primal ordering used throughout the crate: for each device `m`, the
//! device value `x_m` followed by its users' copies `x_{m,1}, .., x_{m,N_m}`.
//! Consensus duals are stacked edge by edge in the same device-major order.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("topology has no devices")]
    EmptyTopology,
    #[error("device {0} has no users")]
    DeviceWithoutUsers(usize),
    #[error("step {t} is outside the horizon of {horizon} steps")]
    HorizonExceeded { t: usize, horizon: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("trace line {line}: {msg}")]
    Trace { line: u64, msg: String },
    #[error("io: {0}")]
    Io(String),
}

/// Device/user star graphs with their incidence matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    device_users: Vec<usize>,
    blocks: Vec<DMatrix<f64>>,
    d: DMatrix<f64>,
    omega: f64,
}

/// Builds one star per device. Row `n` of `D_m` is `e_device - e_user_n`.
pub fn build_incidence(device_users: &[usize]) -> Result<Topology, NetworkError> {
    if device_users.is_empty() {
        return Err(NetworkError::EmptyTopology);
    }
    if let Some(m) = device_users.iter().position(|&n| n == 0) {
        return Err(NetworkError::DeviceWithoutUsers(m));
    }
    let blocks: Vec<DMatrix<f64>> = device_users
        .iter()
        .map(|&n| {
            let mut b = DMatrix::zeros(n, n + 1);
            for r in 0..n {
                b[(r, 0)] = 1.0;
                b[(r, r + 1)] = -1.0;
            }
            b
        })
        .collect();
    let rows: usize = device_users.iter().sum();
    let cols = rows + device_users.len();
    let mut d = DMatrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in &blocks {
        d.view_mut((r0, c0), (b.nrows(), b.ncols())).copy_from(b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    let omega = spectral_norm(&d);
    Ok(Topology { device_users: device_users.to_vec(), blocks, d, omega })
}

/// Largest singular value by power iteration on `AᵀA`.
fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return 0.0;
    }
    let ata = a.transpose() * a;
    // Uneven start so no eigenvector is accidentally orthogonal to it.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919 % 13) as f64));
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..10_000 {
        let w = &ata * &v;
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / nw;
        if (next - est).abs() <= 1e-15 * next.abs() {
            est = next;
            break;
        }
        est = next;
    }
    est.max(0.0).sqrt()
}

impl Topology {
    pub fn n_devices(&self) -> usize {
        self.device_users.len()
    }

    pub fn n_users(&self) -> usize {
        self.device_users.iter().sum()
    }

    pub fn device_users(&self) -> &[usize] {
        &self.device_users
    }

    /// Incidence matrix `D_m` of one device.
    pub fn block(&self, m: usize) -> &DMatrix<f64> {
        &self.blocks[m]
    }

    /// Block-diagonal augmented incidence matrix `D`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// Largest singular value of `D`.
    pub fn omega(&self) -> f64 {
        self.omega
    }

    /// Length of the stacked primal vector.
    pub fn stacked_len(&self) -> usize {
        self.n_users() + self.n_devices()
    }

    /// Index of edge `(m, n)` in the stacked dual vector.
    pub fn edge_index(&self, m: usize, n: usize) -> usize {
        self.device_users[..m].iter().sum::<usize>() + n
    }

    pub fn stack(&self, x_dev: &[f64], x_user: &[Vec<f64>]) -> Result<DVector<f64>, NetworkError> {
        self.check_shape(x_dev, x_user)?;
        let mut out = Vec::with_capacity(self.stacked_len());
        for (m, xm) in x_dev.iter().enumerate() {
            out.push(*xm);
            out.extend_from_slice(&x_user[m]);
        }
        Ok(DVector::from_vec(out))
    }

    pub fn unstack(&self, x: &DVector<f64>) -> Result<(Vec<f64>, Vec<Vec<f64>>), NetworkError> {
        if x.len() != self.stacked_len() {
            return Err(NetworkError::DimensionMismatch(format!(
                "stacked vector has {} entries, topology needs {}",
                x.len(),
                self.stacked_len()
            )));
        }
        let mut k = 0;
        let mut x_dev = Vec::with_capacity(self.n_devices());
        let mut x_user = Vec::with_capacity(self.n_devices());
        for &n in &self.device_users {
            x_dev.push(x[k]);
            x_user.push(x.rows(k + 1, n).iter().copied().collect());
            k += n + 1;
        }
        Ok((x_dev, x_user))
    }

    pub fn check_shape(&self, x_dev: &[f64], x_user: &[Vec<f64>]) -> Result<(), NetworkError> {
        let ok = x_dev.len() == self.n_devices()
            && x_user.len() == self.n_devices()
            && x_user.iter().zip(&self.device_users).all(|(u, &n)| u.len() == n);
        if ok {
            Ok(())
        } else {
            Err(NetworkError::DimensionMismatch("per-device user vectors do not match the topology".into()))
        }
    }

    /// `‖D x‖` for the stacked point.
    pub fn consensus_residual(&self, x_dev: &[f64], x_user: &[Vec<f64>]) -> Result<f64, NetworkError> {
        let x = self.stack(x_dev, x_user)?;
        Ok((&self.d * x).norm())
    }
}

/// A time-indexed matrix that is either constant or given per step.
#[derive(Clone, Debug, PartialEq)]
pub enum MatrixSeries {
    Constant(DMatrix<f64>),
    PerStep(Vec<DMatrix<f64>>),
}

impl MatrixSeries {
    fn at(&self, t: usize) -> &DMatrix<f64> {
        match self {
            MatrixSeries::Constant(m) => m,
            MatrixSeries::PerStep(v) => &v[t],
        }
    }

    fn shape(&self) -> Option<(usize, usize)> {
        match self {
            MatrixSeries::Constant(m) => Some(m.shape()),
            MatrixSeries::PerStep(v) => {
                let s = v.first()?.shape();
                v.iter().all(|m| m.shape() == s).then_some(s)
            }
        }
    }

    fn len(&self) -> Option<usize> {
        match self {
            MatrixSeries::Constant(_) => None,
            MatrixSeries::PerStep(v) => Some(v.len()),
        }
    }
}

/// Linear plant `y^t = A^t x_in + B^t w^t` with additive Gaussian measurement noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Plant {
    a_matrix: MatrixSeries,
    b_matrix: MatrixSeries,
    exogenous: Vec<DVector<f64>>,
    meas_noise_std: f64,
}

impl Plant {
    pub fn new(
        a_matrix: MatrixSeries,
        b_matrix: MatrixSeries,
        exogenous: Vec<DVector<f64>>,
        meas_noise_std: f64,
    ) -> Result<Self, NetworkError> {
        let bad = |s: &str| Err(NetworkError::DimensionMismatch(s.to_string()));
        let (ya, _) = match a_matrix.shape() {
            Some(s) => s,
            None => return bad("A series is empty or changes shape"),
        };
        let (yb, wb) = match b_matrix.shape() {
            Some(s) => s,
            None => return bad("B series is empty or changes shape"),
        };
        if ya != yb {
            return bad("A and B have different output dimensions");
        }
        if exogenous.is_empty() || exogenous.iter().any(|w| w.len() != wb) {
            return bad("exogenous series is empty or does not match the columns of B");
        }
        for len in [a_matrix.len(), b_matrix.len()].into_iter().flatten() {
            if len < exogenous.len() {
                return bad("per-step matrices do not cover the horizon");
            }
        }
        if !(meas_noise_std >= 0.0 && meas_noise_std.is_finite()) {
            return Err(NetworkError::InvalidParams(format!("meas_noise_std must be >= 0, got {meas_noise_std}")));
        }
        Ok(Self { a_matrix, b_matrix, exogenous, meas_noise_std })
    }

    /// Total-power plant: `A = 1ᵀ` over `m` devices and a single exogenous load.
    pub fn total_power(n_devices: usize, load_kw: &[f64], meas_noise_std: f64) -> Result<Self, NetworkError> {
        Self::new(
            MatrixSeries::Constant(DMatrix::from_element(1, n_devices, 1.0)),
            MatrixSeries::Constant(DMatrix::from_element(1, 1, 1.0)),
            load_kw.iter().map(|&w| DVector::from_element(1, w)).collect(),
            meas_noise_std,
        )
    }

    pub fn horizon(&self) -> usize {
        self.exogenous.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.a_matrix.at(0).ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.a_matrix.at(0).nrows()
    }

    pub fn meas_noise_std(&self) -> f64 {
        self.meas_noise_std
    }

    fn check_t(&self, t: usize) -> Result<(), NetworkError> {
        if t >= self.horizon() {
            Err(NetworkError::HorizonExceeded { t, horizon: self.horizon() })
        } else {
            Ok(())
        }
    }

    pub fn a_at(&self, t: usize) -> Result<&DMatrix<f64>, NetworkError> {
        self.check_t(t)?;
        Ok(self.a_matrix.at(t))
    }

    pub fn exogenous_at(&self, t: usize) -> Result<&DVector<f64>, NetworkError> {
        self.check_t(t)?;
        Ok(&self.exogenous[t])
    }

    /// `B^t w^t`, the part of the output not driven by the controllable inputs.
    pub fn offset(&self, t: usize) -> Result<DVector<f64>, NetworkError> {
        self.check_t(t)?;
        Ok(self.b_matrix.at(t) * &self.exogenous[t])
    }

    /// Noiseless output `A^t x_in + B^t w^t`.
    pub fn model_output(&self, t: usize, x_in: &[f64]) -> Result<DVector<f64>, NetworkError> {
        self.check_t(t)?;
        let a = self.a_matrix.at(t);
        if x_in.len() != a.ncols() {
            return Err(NetworkError::DimensionMismatch(format!(
                "plant expects {} inputs, got {}",
                a.ncols(),
                x_in.len()
            )));
        }
        let x = DVector::from_column_slice(x_in);
        Ok(a * x + self.b_matrix.at(t) * &self.exogenous[t])
    }

    /// Noisy measurement. The noise is a pure function of `(seed, t)`.
    pub fn measure_output(&self, t: usize, x_in: &[f64], seed: u64) -> Result<DVector<f64>, NetworkError> {
        let mut y = self.model_output(t, x_in)?;
        if self.meas_noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            for v in y.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += self.meas_noise_std * e;
            }
        }
        Ok(y)
    }
}

/// `C^t(y) = (β/2)(y − y_ref^t)² − ζ^t` on a scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingConstraint {
    beta: f64,
    y_ref: Vec<f64>,
    zeta: Vec<f64>,
}

impl TrackingConstraint {
    pub fn new(beta: f64, y_ref: Vec<f64>, zeta: Vec<f64>) -> Result<Self, NetworkError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(NetworkError::InvalidParams(format!("beta must be > 0, got {beta}")));
        }
        if y_ref.len() != zeta.len() {
            return Err(NetworkError::DimensionMismatch("y_ref and zeta lengths differ".into()));
        }
        if let Some(t) = zeta.iter().position(|z| !(*z > 0.0)) {
            return Err(NetworkError::InvalidParams(format!("zeta must be > 0, step {t} has {}", zeta[t])));
        }
        Ok(Self { beta, y_ref, zeta })
    }

    /// Tolerance set to a fraction of `|y_ref|` at every step.
    pub fn with_relative_tolerance(beta: f64, y_ref: Vec<f64>, fraction: f64) -> Result<Self, NetworkError> {
        let zeta = y_ref.iter().map(|r| fraction * r.abs()).collect();
        Self::new(beta, y_ref, zeta)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn horizon(&self) -> usize {
        self.y_ref.len()
    }

    fn check_t(&self, t: usize) -> Result<(), NetworkError> {
        if t >= self.y_ref.len() {
            Err(NetworkError::HorizonExceeded { t, horizon: self.y_ref.len() })
        } else {
            Ok(())
        }
    }

    pub fn y_ref(&self, t: usize) -> Result<f64, NetworkError> {
        self.check_t(t)?;
        Ok(self.y_ref[t])
    }

    pub fn zeta(&self, t: usize) -> Result<f64, NetworkError> {
        self.check_t(t)?;
        Ok(self.zeta[t])
    }

    pub fn constraint_value(&self, t: usize, y_hat: f64) -> Result<f64, NetworkError> {
        self.check_t(t)?;
        let e = y_hat - self.y_ref[t];
        Ok(0.5 * self.beta * e * e - self.zeta[t])
    }

    /// Derivative of [`constraint_value`](Self::constraint_value) with respect to `y`.
    pub fn constraint_gradient(&self, t: usize, y_hat: f64) -> Result<f64, NetworkError> {
        self.check_t(t)?;
        Ok(self.beta * (y_hat - self.y_ref[t]))
    }
}

/// A time series read from a two-column CSV trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub timestamps_s: Vec<f64>,
    pub values: Vec<f64>,
}

pub const LOAD_COLUMN: &str = "load_kw";
pub const REF_COLUMN: &str = "y_ref_kw";

impl Trace {
    pub fn from_path(path: &Path, value_column: &str) -> Result<Self, NetworkError> {
        let file = std::fs::File::open(path).map_err(|e| NetworkError::Io(format!("{}: {e}", path.display())))?;
        Self::from_reader(file, value_column)
    }

    /// Parses `timestamp_s,<value_column>` with strictly increasing timestamps.
    pub fn from_reader<R: Read>(reader: R, value_column: &str) -> Result<Self, NetworkError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| NetworkError::Trace { line: 1, msg: e.to_string() })?;
        if header.len() != 2 || &header[0] != "timestamp_s" || &header[1] != value_column {
            return Err(NetworkError::Trace {
                line: 1,
                msg: format!("expected header `timestamp_s,{value_column}`, got `{}`", header.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut trace = Trace { timestamps_s: Vec::new(), values: Vec::new() };
        for rec in rdr.records() {
            let rec = rec.map_err(|e| NetworkError::Trace {
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let field = |i: usize| -> Result<f64, NetworkError> {
                let v: f64 = rec[i]
                    .parse()
                    .map_err(|_| NetworkError::Trace { line, msg: format!("`{}` is not a number", &rec[i]) })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(NetworkError::Trace { line, msg: "non-finite value".into() })
                }
            };
            let (ts, v) = (field(0)?, field(1)?);
            if let Some(&prev) = trace.timestamps_s.last() {
                if ts <= prev {
                    return Err(NetworkError::Trace { line, msg: format!("timestamp {ts} does not increase") });
                }
            }
            trace.timestamps_s.push(ts);
            trace.values.push(v);
        }
        if trace.values.is_empty() {
            return Err(NetworkError::Trace { line: 1, msg: "trace has no samples".into() });
        }
        Ok(trace)
    }

    /// Zero-order-hold resampling onto `t = k·step_s`, `k = 0..n_steps`.
    /// The trace must start at or before time 0; the last sample is held to the end.
    pub fn resample(&self, step_s: f64, n_steps: usize) -> Result<Vec<f64>, NetworkError> {
        if self.timestamps_s[0] > 0.0 {
            return Err(NetworkError::Trace { line: 2, msg: format!("trace starts at {} s, after t = 0", self.timestamps_s[0]) });
        }
        let mut out = Vec::with_capacity(n_steps);
        let mut i = 0;
        for k in 0..n_steps {
            let t = k as f64 * step_s;
            while i + 1 < self.timestamps_s.len() && self.timestamps_s[i + 1] <= t {
                i += 1;
            }
            out.push(self.values[i]);
        }
        Ok(out)
    }
}

/// Smooth synthetic load: a base level plus sinusoids plus white noise.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticLoad {
    pub base_kw: f64,
    /// `(amplitude_kw, period_s, phase_rad)` triples.
    pub harmonics: Vec<(f64, f64, f64)>,
    pub noise_std_kw: f64,
}

impl Default for SyntheticLoad {
    fn default() -> Self {
        Self { base_kw: 40.0, harmonics: vec![(4.0, 43_200.0, 0.0), (1.5, 7_200.0, 1.0)], noise_std_kw: 0.2 }
    }
}

impl SyntheticLoad {
    pub fn generate(&self, step_s: f64, n_steps: usize, seed: u64) -> Result<Vec<f64>, NetworkError> {
        if !(self.noise_std_kw >= 0.0) || self.harmonics.iter().any(|h| !(h.1 > 0.0)) {
            return Err(NetworkError::InvalidParams("synthetic load needs noise_std >= 0 and periods > 0".into()));
        }
        let noise = Normal::new(0.0, self.noise_std_kw).map_err(|e| NetworkError::InvalidParams(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n_steps)
            .map(|k| {
                let t = k as f64 * step_s;
                let s: f64 = self
                    .harmonics
                    .iter()
                    .map(|&(a, p, ph)| a * (std::f64::consts::TAU * t / p + ph).sin())
                    .sum();
                self.base_kw + s + noise.sample(&mut rng)
            })
            .collect())
    }
}
