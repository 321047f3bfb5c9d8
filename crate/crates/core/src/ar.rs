//! Stationary AR(1) Gaussian likelihoods.
//!
//! A stationary AR(1) observed at increasing integer times `t_1 < ... < t_n`
//! is a Gaussian Markov chain: `y_1 ~ N(0, s)` and
//! `y_k | y_{k-1} ~ N(rho_k y_{k-1}, s (1 - rho_k^2))` with `s = v / (1 - phi^2)`
//! and `rho_k = phi^(t_k - t_{k-1})`. Every density below is evaluated through
//! that prediction-error decomposition in O(n), gaps included. The dense
//! reference path lives in [`crate::dense`].

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal::LN_2PI;
use crate::panel::{check_times, SeriesView};

/// AR(1) parameters `(phi, v)`: autocorrelation and innovation variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArParams {
    phi: f64,
    v: f64,
}

impl ArParams {
    pub fn new(phi: f64, v: f64) -> Result<Self> {
        if !(phi.is_finite() && phi.abs() < 1.0) {
            return Err(Error::domain(format!("phi must lie in (-1, 1), got {phi}")));
        }
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::domain(format!("innovation variance must be positive, got {v}")));
        }
        Ok(Self { phi, v })
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn v(&self) -> f64 {
        self.v
    }

    /// Map to `(atanh phi, ln v)`.
    pub fn to_unconstrained(&self) -> [f64; 2] {
        [self.phi.atanh(), self.v.ln()]
    }

    pub fn from_unconstrained(x: [f64; 2]) -> Result<Self> {
        Self::new(x[0].tanh(), x[1].exp())
    }
}

/// Marginal variance `v / (1 - phi^2)` of the stationary process.
pub fn stationary_variance(theta: &ArParams) -> f64 {
    theta.v / (1.0 - theta.phi * theta.phi)
}

/// Variance of the nonzero mean under the alternative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftScale {
    sigma2: f64,
}

impl MeanShiftScale {
    pub fn new(sigma2: f64) -> Result<Self> {
        if !(sigma2.is_finite() && sigma2 >= 0.0) {
            return Err(Error::domain(format!("mean-shift variance must be >= 0, got {sigma2}")));
        }
        Ok(Self { sigma2 })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
}

/// Dense stationary covariance matrix indexed by observation times.
#[derive(Debug, Clone, PartialEq)]
pub struct Ar1Covariance {
    matrix: DMatrix<f64>,
}

impl Ar1Covariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }
}

pub fn build_ar1_covariance(theta: &ArParams, times: &[i64]) -> Result<Ar1Covariance> {
    check_times(times)?;
    let s = stationary_variance(theta);
    let n = times.len();
    let matrix = DMatrix::from_fn(n, n, |i, j| {
        let lag = (times[i] - times[j]).unsigned_abs();
        s * theta.phi.powi(lag as i32)
    });
    Ok(Ar1Covariance { matrix })
}

/// Per-parameter constants reused across many likelihood evaluations.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ar1Consts {
    phi: f64,
    v: f64,
    s: f64,
    ln_s: f64,
    ln_v: f64,
}

impl From<&ArParams> for Ar1Consts {
    fn from(theta: &ArParams) -> Self {
        let s = stationary_variance(theta);
        Self {
            phi: theta.phi,
            v: theta.v,
            s,
            ln_s: s.ln(),
            ln_v: theta.v.ln(),
        }
    }
}

impl Ar1Consts {
    /// `(rho, c, ln c)` for a step of `lag` time units.
    #[inline]
    fn step(&self, lag: i64) -> (f64, f64, f64) {
        if lag == 1 {
            (self.phi, self.v, self.ln_v)
        } else {
            let rho = self.phi.powi(lag as i32);
            let c = self.s * (1.0 - rho * rho);
            (rho, c, c.ln())
        }
    }

    /// Log density of the residuals `r(k)` at `times`.
    #[inline]
    pub(crate) fn loglik_with<F: Fn(usize) -> f64>(&self, times: &[i64], r: F) -> f64 {
        let n = times.len();
        let mut prev = r(0);
        let mut quad = prev * prev / self.s;
        let mut log_det = self.ln_s;
        for k in 1..n {
            let (rho, c, ln_c) = self.step(times[k] - times[k - 1]);
            let cur = r(k);
            let e = cur - rho * prev;
            quad += e * e / c;
            log_det += ln_c;
            prev = cur;
        }
        -0.5 * (n as f64 * LN_2PI + log_det + quad)
    }

    /// `(1'Q1, 1'Qy, y'Qy, log|Sigma|)` with `Q` the precision matrix.
    #[inline]
    pub(crate) fn quadratics(&self, times: &[i64], y: &[f64]) -> (f64, f64, f64, f64) {
        let inv = 1.0 / self.s.sqrt();
        let (mut w1, mut wy) = (inv, y[0] * inv);
        let (mut a, mut b, mut q) = (w1 * w1, w1 * wy, wy * wy);
        let mut log_det = self.ln_s;
        for k in 1..times.len() {
            let (rho, c, ln_c) = self.step(times[k] - times[k - 1]);
            let inv = 1.0 / c.sqrt();
            w1 = (1.0 - rho) * inv;
            wy = (y[k] - rho * y[k - 1]) * inv;
            a += w1 * w1;
            b += w1 * wy;
            q += wy * wy;
            log_det += ln_c;
        }
        (a, b, q, log_det)
    }

    /// Tridiagonal precision: `(diag, super-diagonal)`.
    pub(crate) fn precision_tridiag(&self, times: &[i64]) -> (Vec<f64>, Vec<f64>) {
        let n = times.len();
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; n.saturating_sub(1)];
        diag[0] = 1.0 / self.s;
        for k in 1..n {
            let (rho, c, _) = self.step(times[k] - times[k - 1]);
            // Row k of the whitening map is (-rho/sqrt(c)) e_{k-1} + (1/sqrt(c)) e_k.
            diag[k] += 1.0 / c;
            diag[k - 1] += rho * rho / c;
            off[k - 1] = -rho / c;
        }
        (diag, off)
    }
}

/// `log N(y | 0, Sigma_theta)`.
pub fn ar1_loglik(y: SeriesView<'_>, theta: &ArParams) -> f64 {
    Ar1Consts::from(theta).loglik_with(y.times, |k| y.values[k])
}

/// `log N(y | 0, Sigma_theta + sigma2 * 11')`, via a rank-one update of the null solve.
pub fn mean_shift_loglik(y: SeriesView<'_>, theta: &ArParams, scale: MeanShiftScale) -> f64 {
    if scale.sigma2 == 0.0 {
        return ar1_loglik(y, theta);
    }
    null_and_shift_loglik(y, theta, scale).1
}

/// Both the null and the mean-shift log densities from one pass over the data.
pub fn null_and_shift_loglik(
    y: SeriesView<'_>,
    theta: &ArParams,
    scale: MeanShiftScale,
) -> (f64, f64) {
    let consts = Ar1Consts::from(theta);
    let (a, b, q, log_det) = consts.quadratics(y.times, y.values);
    let n = y.len() as f64;
    let null = -0.5 * (n * LN_2PI + log_det + q);
    if scale.sigma2 == 0.0 {
        return (null, null);
    }
    let denom = 1.0 + scale.sigma2 * a;
    let shift = -0.5 * (n * LN_2PI + log_det + denom.ln() + q - scale.sigma2 * b * b / denom);
    (null, shift)
}

/// Bayes factor of the mean-shift alternative against the zero-mean null.
pub fn conditional_bayes_factor(y: SeriesView<'_>, theta: &ArParams, scale: MeanShiftScale) -> f64 {
    log_conditional_bayes_factor(y, theta, scale).exp()
}

pub fn log_conditional_bayes_factor(
    y: SeriesView<'_>,
    theta: &ArParams,
    scale: MeanShiftScale,
) -> f64 {
    if scale.sigma2 == 0.0 {
        return 0.0;
    }
    let (l0, l1) = null_and_shift_loglik(y, theta, scale);
    l1 - l0
}

/// Log density of `y - shift` where `shift` is a constant level.
pub fn shifted_loglik(y: SeriesView<'_>, theta: &ArParams, level: f64) -> f64 {
    Ar1Consts::from(theta).loglik_with(y.times, |k| y.values[k] - level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::ObservedSeries;
    use approx::assert_relative_eq;

    fn theta(phi: f64, v: f64) -> ArParams {
        ArParams::new(phi, v).unwrap()
    }

    #[test]
    fn params_domain() {
        assert!(ArParams::new(1.0, 1.0).is_err());
        assert!(ArParams::new(-1.0, 1.0).is_err());
        assert!(ArParams::new(0.5, 0.0).is_err());
        assert!(ArParams::new(f64::NAN, 1.0).is_err());
        let t = theta(-0.3, 2.0);
        let back = ArParams::from_unconstrained(t.to_unconstrained()).unwrap();
        assert_relative_eq!(back.phi(), -0.3, epsilon = 1e-14);
        assert_relative_eq!(back.v(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn covariance_examples() {
        let c = build_ar1_covariance(&theta(0.0, 1.0), &[1, 2, 3]).unwrap();
        assert_eq!(c.matrix(), &DMatrix::identity(3, 3));

        let c = build_ar1_covariance(&theta(0.5, 0.75), &[1, 2, 3]).unwrap();
        let m = c.matrix();
        for i in 0..3 {
            assert_relative_eq!(m[(i, i)], 1.0, epsilon = 1e-15);
        }
        assert_relative_eq!(m[(0, 1)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(m[(1, 2)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(m[(0, 2)], 0.25, epsilon = 1e-15);

        let c = build_ar1_covariance(&theta(0.9, 0.5), &[1, 3]).unwrap();
        let s = 0.5 / 0.19;
        assert_relative_eq!(c.matrix()[(0, 0)], s, epsilon = 1e-12);
        assert_relative_eq!(c.matrix()[(1, 0)], s * 0.81, epsilon = 1e-12);
        assert_eq!(c.matrix()[(1, 0)], c.matrix()[(0, 1)]);

        assert!(build_ar1_covariance(&theta(0.5, 1.0), &[2, 1]).is_err());
    }

    #[test]
    fn covariance_matches_simulated_recursion() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        // Run the recursion to stationarity and compare lag-0 and lag-2 moments.
        let t = theta(0.9, 0.5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, t.v().sqrt()).unwrap();
        let mut y = 0.0;
        for _ in 0..1000 {
            y = t.phi() * y + noise.sample(&mut rng);
        }
        let (mut m0, mut m2, mut prev2, mut prev1) = (0.0, 0.0, y, y);
        let n = 400_000;
        for _ in 0..n {
            let cur = t.phi() * prev1 + noise.sample(&mut rng);
            m0 += cur * cur;
            m2 += cur * prev2;
            prev2 = prev1;
            prev1 = cur;
        }
        let c = build_ar1_covariance(&t, &[1, 3]).unwrap();
        assert!((m0 / n as f64 / c.matrix()[(0, 0)] - 1.0).abs() < 0.05);
        assert!((m2 / n as f64 / c.matrix()[(0, 1)] - 1.0).abs() < 0.06);
    }

    #[test]
    fn loglik_examples() {
        let y = ObservedSeries::contiguous("u", vec![0.0]).unwrap();
        assert_relative_eq!(ar1_loglik(y.view(), &theta(0.5, 0.75)), -0.5 * LN_2PI, epsilon = 1e-15);

        let y = ObservedSeries::contiguous("u", vec![1.0, 1.0]).unwrap();
        assert_relative_eq!(ar1_loglik(y.view(), &theta(0.0, 1.0)), -LN_2PI - 1.0, epsilon = 1e-14);
    }

    #[test]
    fn mean_shift_examples() {
        let y = ObservedSeries::contiguous("u", vec![0.3, -1.2, 2.0]).unwrap();
        let t = theta(0.4, 0.8);
        let zero = MeanShiftScale::new(0.0).unwrap();
        assert_eq!(mean_shift_loglik(y.view(), &t, zero), ar1_loglik(y.view(), &t));
        assert_eq!(conditional_bayes_factor(y.view(), &t, zero), 1.0);

        let y = ObservedSeries::contiguous("u", vec![0.0]).unwrap();
        let one = MeanShiftScale::new(1.0).unwrap();
        let expected = -0.5 * (LN_2PI + 2f64.ln());
        assert_relative_eq!(mean_shift_loglik(y.view(), &theta(0.0, 1.0), one), expected, epsilon = 1e-14);
        assert!(MeanShiftScale::new(-1.0).is_err());
    }

    #[test]
    fn bayes_factor_direction() {
        let t = theta(0.5, 0.75);
        let one = MeanShiftScale::new(1.0).unwrap();
        let zero = ObservedSeries::contiguous("u", vec![0.0; 20]).unwrap();
        let bf0 = conditional_bayes_factor(zero.view(), &t, one);
        assert!(bf0 > 0.0 && bf0 < 1.0);
        let mut last = bf0;
        for c in [0.5, 1.0, 2.0, 3.0] {
            let y = ObservedSeries::contiguous("u", vec![c; 20]).unwrap();
            let bf = conditional_bayes_factor(y.view(), &t, one);
            assert!(bf > last);
            last = bf;
        }
        assert!(last > 1e3);
    }

    #[test]
    fn stationary_variance_examples() {
        assert_eq!(stationary_variance(&theta(0.0, 2.0)), 2.0);
        assert_relative_eq!(stationary_variance(&theta(0.5, 0.75)), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn tridiagonal_precision_inverts_covariance() {
        let t = theta(-0.7, 1.3);
        let times = [3, 4, 7, 8, 9, 15];
        let (d, o) = Ar1Consts::from(&t).precision_tridiag(&times);
        let n = times.len();
        let mut q = DMatrix::zeros(n, n);
        for i in 0..n {
            q[(i, i)] = d[i];
            if i + 1 < n {
                q[(i, i + 1)] = o[i];
                q[(i + 1, i)] = o[i];
            }
        }
        let c = build_ar1_covariance(&t, &times).unwrap().into_matrix();
        let prod = q * c;
        assert!((prod - DMatrix::identity(n, n)).abs().max() < 1e-10);
    }
}
