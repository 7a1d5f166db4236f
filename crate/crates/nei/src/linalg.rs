//! Shared dense linear-algebra helpers.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FactorizationError {
    #[error(
        "matrix of order {order} is not positive definite even with jitter {max_jitter:.3e}"
    )]
    NotPositiveDefinite { order: usize, max_jitter: f64 },
}

/// Relative jitter added to the diagonal before the first factorization try.
pub const BASE_JITTER: f64 = 1e-8;
/// Jitter doubling stops once this relative level is exceeded.
pub const MAX_JITTER: f64 = 1e-4;

/// Lower-triangular Cholesky factor with escalating diagonal jitter.
///
/// `scale` sets the unit of the jitter (the kernel signal variance for Gram
/// matrices). Jitter starts at `BASE_JITTER * scale` and doubles until the
/// factorization succeeds or exceeds `MAX_JITTER * scale`.
pub struct JitteredCholesky {
    pub lower: DMatrix<f64>,
    pub jitter: f64,
}

pub fn cholesky_with_jitter(
    mat: &DMatrix<f64>,
    scale: f64,
) -> Result<JitteredCholesky, FactorizationError> {
    let n = mat.nrows();
    let scale = scale.max(f64::MIN_POSITIVE);
    let mut jitter = BASE_JITTER * scale;
    let max_jitter = MAX_JITTER * scale;
    loop {
        let mut work = mat.clone();
        for i in 0..n {
            work[(i, i)] += jitter;
        }
        if let Some(chol) = work.cholesky() {
            return Ok(JitteredCholesky { lower: chol.l(), jitter });
        }
        jitter *= 2.0;
        if jitter > max_jitter {
            return Err(FactorizationError::NotPositiveDefinite { order: n, max_jitter });
        }
    }
}

/// Solves L z = b for lower-triangular L.
pub fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut z = b.clone();
    l.solve_lower_triangular_mut(&mut z);
    z
}

/// Solves Lᵀ z = b for lower-triangular L.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut z = b.clone();
    l.tr_solve_lower_triangular_mut(&mut z);
    z
}

/// Solves (L Lᵀ) z = b.
pub fn solve_spd(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorizes_spd_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let f = cholesky_with_jitter(&m, 1.0).unwrap();
        let rebuilt = &f.lower * f.lower.transpose();
        assert!((rebuilt[(0, 0)] - 4.0).abs() < 1e-6);
        assert!((rebuilt[(0, 1)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn escalates_then_fails_on_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(cholesky_with_jitter(&m, 1.0).is_err());
    }

    #[test]
    fn jitter_rescues_singular_gram() {
        // Rank-one matrix, repairable by a small diagonal bump.
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = cholesky_with_jitter(&m, 1.0).unwrap();
        assert!(f.jitter >= BASE_JITTER);
    }

    #[test]
    fn triangular_solves_agree_with_direct_inverse() {
        let m = DMatrix::from_row_slice(3, 3, &[5.0, 1.0, 0.2, 1.0, 4.0, 0.5, 0.2, 0.5, 3.0]);
        let b = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let f = cholesky_with_jitter(&m, 0.0).unwrap();
        let x = solve_spd(&f.lower, &b);
        let expect = m.try_inverse().unwrap() * &b;
        assert!((x - expect).norm() < 1e-10);
    }
}
