//! Dense factorization helpers shared by samplers and RKHS norms.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Cholesky factorization with escalating diagonal jitter.
///
/// Tries no jitter first, then `10^-14 .. max_rel` times the mean diagonal.
/// Returns the factorization and the jitter that was used.
pub fn jittered_cholesky(
    matrix: &DMatrix<f64>,
    max_rel: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = matrix.nrows();
    let mean_diag = matrix.trace() / n.max(1) as f64;
    if let Some(c) = Cholesky::new(matrix.clone()) {
        return Ok((c, 0.0));
    }
    let mut rel = 1e-14;
    let mut last = 0.0;
    while rel <= max_rel * (1.0 + 1e-12) {
        let jitter = rel * mean_diag;
        let mut m = matrix.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok((c, jitter));
        }
        last = jitter;
        rel *= 10.0;
    }
    Err(Error::Factorization { jitter: last })
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn symmetric_eigen_range(matrix: &DMatrix<f64>) -> (f64, f64) {
    let eig = matrix.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}
