//! Dense-matrix reference densities.
//!
//! These build the full covariance and factor it with a Cholesky
//! decomposition. They are O(n^3) and exist to cross-check the O(n) paths in
//! [`crate::ar`] and the whitened kriging update in [`crate::gp`].

use nalgebra::{DMatrix, DVector};

use crate::ar::{build_ar1_covariance, ArParams, MeanShiftScale};
use crate::error::{Error, Result};
use crate::normal::LN_2PI;
use crate::panel::SeriesView;

pub fn mvn_logpdf(y: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    let n = y.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::invalid("covariance shape does not match data"));
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("covariance is not positive definite"))?;
    let l = chol.l();
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let z = l
        .solve_lower_triangular(&DVector::from_column_slice(y))
        .ok_or_else(|| Error::numerical("triangular solve failed"))?;
    Ok(-0.5 * (n as f64 * LN_2PI + log_det + z.norm_squared()))
}

pub fn ar1_loglik_dense(y: SeriesView<'_>, theta: &ArParams) -> Result<f64> {
    let cov = build_ar1_covariance(theta, y.times)?;
    mvn_logpdf(y.values, cov.matrix())
}

pub fn mean_shift_loglik_dense(
    y: SeriesView<'_>,
    theta: &ArParams,
    scale: MeanShiftScale,
) -> Result<f64> {
    let mut cov = build_ar1_covariance(theta, y.times)?.into_matrix();
    cov.add_scalar_mut(scale.sigma2());
    mvn_logpdf(y.values, &cov)
}

/// Smallest pivot of the Cholesky factor, `None` if factorization fails.
pub fn min_cholesky_pivot(cov: &DMatrix<f64>) -> Option<f64> {
    let chol = cov.clone().cholesky()?;
    chol.l().diagonal().iter().cloned().reduce(f64::min)
}
