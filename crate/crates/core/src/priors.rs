//! Priors on AR(1) parameters.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::ar::{ArParams, MeanShiftScale};
use crate::error::{Error, Result};
use crate::normal;

/// `N(phi | d, D)` truncated to (-1, 1) times `IG(v | a, b)`.
///
/// `D` is a variance. The inverse gamma has shape `a` and scale `b`
/// (mean `b / (a - 1)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArPrior {
    pub d: f64,
    pub phi_var: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for ArPrior {
    fn default() -> Self {
        Self {
            d: 0.5,
            phi_var: 0.25 * 0.25,
            a: 2.0,
            b: 1.0,
        }
    }
}

impl ArPrior {
    pub fn new(d: f64, phi_var: f64, a: f64, b: f64) -> Result<Self> {
        let p = Self { d, phi_var, a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.d.is_finite() {
            return Err(Error::domain("prior mean of phi must be finite"));
        }
        for (name, x) in [("D", self.phi_var), ("a", self.a), ("b", self.b)] {
            if !(x.is_finite() && x > 0.0) {
                return Err(Error::domain(format!("prior hyperparameter {name} must be positive, got {x}")));
            }
        }
        Ok(())
    }

    fn phi_sd(&self) -> f64 {
        self.phi_var.sqrt()
    }

    /// Log of the normal mass on (-1, 1).
    fn ln_truncation_mass(&self) -> f64 {
        let sd = self.phi_sd();
        let mass = normal::cdf((1.0 - self.d) / sd) - normal::cdf((-1.0 - self.d) / sd);
        mass.ln()
    }

    pub fn ln_pdf_phi(&self, phi: f64) -> f64 {
        if phi.abs() >= 1.0 {
            return f64::NEG_INFINITY;
        }
        let sd = self.phi_sd();
        normal::ln_pdf((phi - self.d) / sd) - sd.ln() - self.ln_truncation_mass()
    }

    pub fn ln_pdf_v(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.a * self.b.ln() - ln_gamma(self.a) - (self.a + 1.0) * v.ln() - self.b / v
    }

    pub fn ln_pdf(&self, theta: &ArParams) -> f64 {
        self.ln_pdf_phi(theta.phi()) + self.ln_pdf_v(theta.v())
    }

    /// Prior density of `(atanh phi, ln v)`, Jacobian included.
    pub fn ln_pdf_unconstrained(&self, x: [f64; 2]) -> f64 {
        let phi = x[0].tanh();
        let v = x[1].exp();
        if phi.abs() >= 1.0 || !v.is_finite() || v <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.ln_pdf_phi(phi) + self.ln_pdf_v(v) + (1.0 - phi * phi).ln() + x[1]
    }

    /// Draw phi by rejection from the untruncated normal.
    pub fn sample_phi<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let sd = self.phi_sd();
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let phi = self.d + sd * z;
            if phi.abs() < 1.0 {
                return phi;
            }
        }
    }

    pub fn sample_v<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = Gamma::new(self.a, 1.0).expect("validated shape");
        loop {
            let v = self.b / g.sample(rng);
            if v.is_finite() && v > 0.0 {
                return v;
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ArParams {
        loop {
            // phi can round to exactly +-1 only for absurd hyperparameters; retry.
            if let Ok(t) = ArParams::new(self.sample_phi(rng), self.sample_v(rng)) {
                return t;
            }
        }
    }
}

/// Hyperparameters of the single-`(phi, v)` mean-shift test.
/// The mixing weight `p` always carries a Uniform(0, 1) prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParametricPrior {
    pub ar: ArPrior,
    pub sigma2: f64,
}

impl Default for ParametricPrior {
    fn default() -> Self {
        Self {
            ar: ArPrior::default(),
            sigma2: 1.0,
        }
    }
}

impl ParametricPrior {
    pub fn validate(&self) -> Result<()> {
        self.ar.validate()?;
        MeanShiftScale::new(self.sigma2)?;
        Ok(())
    }

    pub fn scale(&self) -> MeanShiftScale {
        MeanShiftScale::new(self.sigma2).expect("validated sigma2")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn truncated_phi_density_integrates_to_one() {
        let p = ArPrior::default();
        let n = 20_000;
        let h = 2.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| p.ln_pdf_phi(-1.0 + (i as f64 + 0.5) * h).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inverse_gamma_density_integrates_to_one() {
        let p = ArPrior::default();
        // substitute v = e^u
        let (lo, hi, n) = (-12.0f64, 12.0f64, 200_000);
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..n)
            .map(|i| {
                let u = lo + (i as f64 + 0.5) * h;
                (p.ln_pdf_v(u.exp()) + u).exp() * h
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn draws_respect_domain_and_moments() {
        let p = ArPrior::default();
        let mut rng = rng_from(9);
        let n = 100_000;
        let draws: Vec<ArParams> = (0..n).map(|_| p.sample(&mut rng)).collect();
        assert!(draws.iter().all(|t| t.phi().abs() < 1.0 && t.v() > 0.0));
        // IG(2,1) has mean 1 but infinite variance; compare the median, 1/Gamma(2,1) median.
        let mut vs: Vec<f64> = draws.iter().map(|t| t.v()).collect();
        vs.sort_by(f64::total_cmp);
        let median = vs[n / 2];
        assert!((median - 1.0 / 1.678_346_990_016_661).abs() < 0.01);
        let mean_phi = draws.iter().map(|t| t.phi()).sum::<f64>() / n as f64;
        // truncation at d + 2 sd pulls the mean down to about 0.48619
        assert!((mean_phi - 0.486_188).abs() < 0.005);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(ArPrior::new(0.5, 0.0, 2.0, 1.0).is_err());
        assert!(ArPrior::new(0.5, 0.1, -2.0, 1.0).is_err());
        assert!(ArPrior::new(f64::NAN, 0.1, 2.0, 1.0).is_err());
    }
}
