//! Dense multivariate-normal density by explicit covariance assembly.

use nalgebra::{DMatrix, DVector};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// log N(x; mean, cov) via a Cholesky factorisation.
pub fn mvn_logpdf(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> f64 {
    let n = x.len();
    let chol = cov.clone().cholesky().expect("covariance must be positive definite");
    let diff = DVector::from_iterator(n, x.iter().zip(mean).map(|(a, b)| a - b));
    let solved = chol.solve(&diff);
    let quad = diff.dot(&solved);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    -0.5 * (n as f64 * LN_2PI + log_det + quad)
}

/// Mean and covariance of `x = M z + c` for `z ~ N(0, I)` built from a linear
/// recursion: `x = (I - B)^{-1} (c + D z)` where `B` is strictly lower
/// triangular (the autoregressive couplings) and `D` diagonal (the sds).
pub fn linear_gaussian_moments(
    coupling: &DMatrix<f64>,
    offsets: &[f64],
    sds: &[f64],
) -> (Vec<f64>, DMatrix<f64>) {
    let n = offsets.len();
    let ib = DMatrix::<f64>::identity(n, n) - coupling;
    let inv = ib.try_inverse().expect("I - B must be invertible");
    let mean = &inv * DVector::from_column_slice(offsets);
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(sds));
    let m = &inv * d;
    let cov = &m * m.transpose();
    (mean.iter().copied().collect(), cov)
}
