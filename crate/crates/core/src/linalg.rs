use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Relative jitter ladder tried before a kernel matrix is declared singular.
const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// A Cholesky factor together with the jitter that was needed to obtain it.
#[derive(Clone, Debug)]
pub(crate) struct Factor {
    chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }
}

/// Factorizes a symmetric matrix, escalating diagonal jitter (relative to the
/// mean diagonal) from 0 through 1e-10 .. 1e-6. Returns `None` when every rung fails.
pub(crate) fn factorize(m: &DMatrix<f64>) -> Option<Factor> {
    let n = m.nrows();
    if n == 0 {
        return Cholesky::new(m.clone()).map(|chol| Factor { chol, jitter: 0.0 });
    }
    let scale = (m.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64).max(f64::MIN_POSITIVE);
    if !m.iter().all(|v| v.is_finite()) {
        return None;
    }
    for rel in JITTER_LADDER {
        let jitter = rel * scale;
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(a) {
            let ok = chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0);
            if ok {
                return Some(Factor { chol, jitter });
            }
        }
    }
    None
}
