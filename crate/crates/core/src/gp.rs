//! Gaussian-process trajectories on the integer time grid.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ar::{Ar1Consts, ArParams};
use crate::error::{Error, Result};

/// Squared-exponential kernel `kappa1 * exp(-0.5 * ((t1 - t2) / kappa2)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpKernelParams {
    kappa1: f64,
    kappa2: f64,
}

impl GpKernelParams {
    pub fn new(kappa1: f64, kappa2: f64) -> Result<Self> {
        for (name, x) in [("kappa1", kappa1), ("kappa2", kappa2)] {
            if !(x.is_finite() && x > 0.0) {
                return Err(Error::domain(format!("{name} must be positive, got {x}")));
            }
        }
        Ok(Self { kappa1, kappa2 })
    }

    pub fn kappa1(&self) -> f64 {
        self.kappa1
    }

    pub fn kappa2(&self) -> f64 {
        self.kappa2
    }

    pub fn eval(&self, lag: f64) -> f64 {
        let u = lag / self.kappa2;
        self.kappa1 * (-0.5 * u * u).exp()
    }
}

pub fn gp_covariance(kernel: &GpKernelParams, times: &[i64]) -> Result<DMatrix<f64>> {
    crate::panel::check_times(times)?;
    let n = times.len();
    Ok(DMatrix::from_fn(n, n, |i, j| kernel.eval((times[i] - times[j]) as f64)))
}

/// Cholesky factor of the jittered kernel matrix on a fixed grid.
#[derive(Debug, Clone)]
pub struct GpFactor {
    kernel: GpKernelParams,
    times: Vec<i64>,
    chol: DMatrix<f64>,
    jitter: f64,
}

impl GpFactor {
    /// Adds `1e-8 * kappa1` to the diagonal, escalating tenfold up to `1e-4 * kappa1`.
    pub fn new(kernel: GpKernelParams, times: &[i64]) -> Result<Self> {
        let base = gp_covariance(&kernel, times)?;
        let mut jitter = 1e-8 * kernel.kappa1;
        while jitter <= 1e-4 * kernel.kappa1 * (1.0 + 1e-12) {
            let mut k = base.clone();
            for i in 0..k.nrows() {
                k[(i, i)] += jitter;
            }
            if let Some(c) = k.cholesky() {
                return Ok(Self {
                    kernel,
                    times: times.to_vec(),
                    chol: c.l(),
                    jitter,
                });
            }
            jitter *= 10.0;
        }
        Err(Error::numerical(format!(
            "GP covariance on {} grid points is not positive definite even with jitter {:e}",
            times.len(),
            1e-4 * kernel.kappa1
        )))
    }

    pub fn kernel(&self) -> &GpKernelParams {
        &self.kernel
    }

    pub fn times(&self) -> &[i64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower Cholesky factor of `K + jitter * I`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// The jittered covariance `L L'`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    /// A zero-mean path drawn from the prior.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let xi = standard_normal_vector(self.len(), rng);
        (&self.chol * xi).as_slice().to_vec()
    }

    /// Exact conditional of the path given `obs`, in whitened form.
    pub fn conditional(&self, obs: &[GpObservation<'_>]) -> Result<GpConditional<'_>> {
        let g = self.len();
        let mut lambda = DMatrix::<f64>::zeros(g, g);
        let mut b = DVector::<f64>::zeros(g);
        for o in obs {
            o.accumulate(g, &mut lambda, &mut b)?;
        }
        let lt = self.chol.transpose();
        let mut bmat = &lt * &lambda * &self.chol;
        for i in 0..g {
            bmat[(i, i)] += 1.0;
        }
        let chol_b = bmat
            .cholesky()
            .ok_or_else(|| Error::numerical("whitened kriging system is not positive definite"))?
            .l();
        // mean = L B^{-1} L' b
        let rhs = &lt * b;
        let u = chol_b
            .solve_lower_triangular(&rhs)
            .and_then(|u| chol_b.transpose().solve_upper_triangular(&u))
            .ok_or_else(|| Error::numerical("kriging triangular solve failed"))?;
        let mean = &self.chol * u;
        Ok(GpConditional {
            factor: self,
            mean,
            chol_b,
        })
    }
}

fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// One series observed on part of the grid with AR(1) noise: `y = f(t) + z`.
#[derive(Debug, Clone, Copy)]
pub struct GpObservation<'a> {
    /// Grid positions of `times`.
    pub indices: &'a [usize],
    pub times: &'a [i64],
    pub values: &'a [f64],
    pub theta: &'a ArParams,
}

impl GpObservation<'_> {
    /// Adds `E' Q E` to `lambda` and `E' Q y` to `b`.
    fn accumulate(&self, g: usize, lambda: &mut DMatrix<f64>, b: &mut DVector<f64>) -> Result<()> {
        let n = self.times.len();
        if self.indices.len() != n || self.values.len() != n || n == 0 {
            return Err(Error::invalid("GP observation has mismatched lengths"));
        }
        if self.indices.iter().any(|&i| i >= g) {
            return Err(Error::invalid("GP observation lies outside the grid"));
        }
        let (diag, off) = Ar1Consts::from(self.theta).precision_tridiag(self.times);
        let idx = self.indices;
        for k in 0..n {
            lambda[(idx[k], idx[k])] += diag[k];
            let mut qy = diag[k] * self.values[k];
            if k > 0 {
                qy += off[k - 1] * self.values[k - 1];
            }
            if k + 1 < n {
                lambda[(idx[k], idx[k + 1])] += off[k];
                lambda[(idx[k + 1], idx[k])] += off[k];
                qy += off[k] * self.values[k + 1];
            }
            b[idx[k]] += qy;
        }
        Ok(())
    }
}

/// Gaussian conditional of a grid path; covariance `L B^{-1} L'`.
#[derive(Debug, Clone)]
pub struct GpConditional<'a> {
    factor: &'a GpFactor,
    mean: DVector<f64>,
    chol_b: DMatrix<f64>,
}

impl GpConditional<'_> {
    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let binv_lt = {
            let lt = self.factor.chol.transpose();
            let y = self
                .chol_b
                .solve_lower_triangular(&lt)
                .expect("positive pivots");
            self.chol_b
                .transpose()
                .solve_upper_triangular(&y)
                .expect("positive pivots")
        };
        &self.factor.chol * binv_lt
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let xi = standard_normal_vector(self.mean.len(), rng);
        let w = self
            .chol_b
            .transpose()
            .solve_upper_triangular(&xi)
            .expect("positive pivots");
        (&self.mean + &self.factor.chol * w).as_slice().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ar::build_ar1_covariance;
    use crate::rng::rng_from;

    fn default_kernel() -> GpKernelParams {
        GpKernelParams::new(1.25, 13.0).unwrap()
    }

    #[test]
    fn kernel_values() {
        let k = default_kernel();
        let c = gp_covariance(&k, &[0, 13, 40]).unwrap();
        assert_eq!(c[(0, 0)], 1.25);
        assert_eq!(c[(2, 2)], 1.25);
        assert!((c[(0, 1)] - 1.25 * (-0.5f64).exp()).abs() < 1e-15);
        assert!((c[(0, 1)] - 0.7582).abs() < 1e-4);
        let mut last = f64::INFINITY;
        for lag in 0..200 {
            let v = k.eval(lag as f64);
            assert!(v <= last && v >= 0.0);
            last = v;
        }
        assert!(k.eval(500.0) < 1e-300);
        assert!(GpKernelParams::new(0.0, 1.0).is_err());
        assert!(gp_covariance(&k, &[3, 2]).is_err());
    }

    #[test]
    fn factor_on_long_grid() {
        let times: Vec<i64> = (1965..=2005).collect();
        let f = GpFactor::new(default_kernel(), &times).unwrap();
        assert!(f.jitter() <= 1e-4 * 1.25);
        let k = f.covariance();
        assert!((k[(0, 0)] - 1.25 - f.jitter()).abs() < 1e-12);
    }

    #[test]
    fn prior_draw_moments() {
        let times: Vec<i64> = (0..41).collect();
        let f = GpFactor::new(default_kernel(), &times).unwrap();
        let mut rng = rng_from(17);
        let n = 10_000;
        let mut sum = vec![0.0; 41];
        let mut sq = vec![0.0; 41];
        let mut cross = 0.0;
        for _ in 0..n {
            let p = f.sample_prior(&mut rng);
            for t in 0..41 {
                sum[t] += p[t];
                sq[t] += p[t] * p[t];
            }
            cross += p[5] * p[18];
        }
        let nf = n as f64;
        for t in 0..41 {
            let m = sum[t] / nf;
            assert!(m.abs() < 4.0 * (1.25 / nf).sqrt(), "mean {m} at {t}");
            let v = sq[t] / nf - m * m;
            assert!((v / 1.25 - 1.0).abs() < 0.05, "var {v} at {t}");
        }
        let corr = (cross / nf) / 1.25;
        assert!((corr - (-0.5f64).exp()).abs() < 0.02, "{corr}");
    }

    /// Dense joint-Gaussian conditioning `K E' (E K E' + S)^{-1}`.
    type DenseObs = (Vec<usize>, Vec<i64>, Vec<f64>, ArParams);

    fn dense_conditional(
        k: &DMatrix<f64>,
        obs: &[DenseObs],
    ) -> (DVector<f64>, DMatrix<f64>) {
        let g = k.nrows();
        let m: usize = obs.iter().map(|o| o.0.len()).sum();
        let mut e = DMatrix::zeros(m, g);
        let mut s = DMatrix::zeros(m, m);
        let mut y = DVector::zeros(m);
        let mut row = 0;
        for (idx, times, vals, theta) in obs {
            let c = build_ar1_covariance(theta, times).unwrap().into_matrix();
            for a in 0..idx.len() {
                e[(row + a, idx[a])] = 1.0;
                y[row + a] = vals[a];
                for b in 0..idx.len() {
                    s[(row + a, row + b)] = c[(a, b)];
                }
            }
            row += idx.len();
        }
        let ke = k * e.transpose();
        let sys = &e * &ke + s;
        let inv = sys.cholesky().unwrap().inverse();
        let gain = &ke * inv;
        (&gain * y, k - &gain * ke.transpose())
    }

    #[test]
    fn kriging_matches_dense_oracle() {
        let mut rng = rng_from(99);
        for case in 0..40 {
            let g = rng.random_range(2..30usize);
            let times: Vec<i64> = (0..g as i64).collect();
            let kernel = GpKernelParams::new(rng.random_range(0.2..2.0), rng.random_range(1.0..15.0)).unwrap();
            let f = GpFactor::new(kernel, &times).unwrap();
            let mut obs = Vec::new();
            for _ in 0..rng.random_range(1..4usize) {
                let idx: Vec<usize> = (0..g).filter(|_| rng.random_bool(0.7)).collect();
                if idx.is_empty() {
                    continue;
                }
                let ts: Vec<i64> = idx.iter().map(|&i| times[i]).collect();
                let vals: Vec<f64> = idx.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
                let theta = ArParams::new(rng.random_range(-0.9..0.95), rng.random_range(0.05..2.0)).unwrap();
                obs.push((idx, ts, vals, theta));
            }
            let views: Vec<GpObservation<'_>> = obs
                .iter()
                .map(|(i, t, v, th)| GpObservation { indices: i, times: t, values: v, theta: th })
                .collect();
            let cond = f.conditional(&views).unwrap();
            let (m, c) = dense_conditional(&f.covariance(), &obs);
            for i in 0..g {
                assert!((cond.mean()[i] - m[i]).abs() < 1e-8, "case {case} mean {i}");
            }
            let cw = cond.covariance();
            assert!((cw - c).amax() < 1e-8, "case {case} covariance");
        }
    }

    #[test]
    fn conditional_draw_moments() {
        let times: Vec<i64> = (0..6).collect();
        let f = GpFactor::new(GpKernelParams::new(1.0, 3.0).unwrap(), &times).unwrap();
        let theta = ArParams::new(0.4, 0.3).unwrap();
        let idx = [1usize, 2, 4];
        let ts = [1i64, 2, 4];
        let vals = [0.8, 1.1, -0.3];
        let obs = [GpObservation { indices: &idx, times: &ts, values: &vals, theta: &theta }];
        let cond = f.conditional(&obs).unwrap();
        let cov = cond.covariance();
        let mut rng = rng_from(2);
        let n = 40_000;
        let mut sum = [0.0; 6];
        let mut sq = [0.0; 6];
        for _ in 0..n {
            let s = cond.sample(&mut rng);
            for i in 0..6 {
                sum[i] += s[i];
                sq[i] += (s[i] - cond.mean()[i]).powi(2);
            }
        }
        for i in 0..6 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((sum[i] / n as f64 - cond.mean()[i]).abs() < 4.5 * se);
            assert!((sq[i] / n as f64 / cov[(i, i)] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn no_observations_gives_prior() {
        let times: Vec<i64> = (0..8).collect();
        let f = GpFactor::new(default_kernel(), &times).unwrap();
        let cond = f.conditional(&[]).unwrap();
        assert!(cond.mean().iter().all(|m| m.abs() < 1e-14));
        assert!((cond.covariance() - f.covariance()).amax() < 1e-10);
    }
}
