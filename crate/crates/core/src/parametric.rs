//! Single-`(phi, v)` mean-shift test with an unknown mixing weight `p`.
//!
//! Each unit is either a zero-mean stationary AR(1) or the same process
//! around a constant mean `m_i ~ N(0, sigma2)`. With `p ~ Uniform(0, 1)` the
//! posterior over `(phi, v, p)` is explored by importance sampling: the
//! parameters move to `(atanh phi, ln v, logit p)`, the joint log-posterior
//! is maximised by BFGS, and a multivariate Student-t (5 d.o.f.) centred at
//! the mode with the inverse negative Hessian as scale is used as the common
//! proposal for every unit's inclusion probability.

use std::io::Write;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::ar::{null_and_shift_loglik, ArParams};
use crate::error::{Error, Result};
use crate::panel::{SeriesPanel, SeriesView};
use crate::priors::ParametricPrior;
use crate::rng::{derived_rng, stage};

pub const DEFAULT_DRAWS: usize = 5000;
pub const PROPOSAL_DF: f64 = 5.0;
const MAX_BFGS_ITERS: usize = 500;
/// Unconstrained coordinates beyond this are treated as divergence.
const BFGS_BOUND: f64 = 1e4;

/// One importance draw on the natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub phi: f64,
    pub v: f64,
    pub p: f64,
}

impl Draw {
    pub fn from_unconstrained(x: &[f64; 3]) -> Self {
        Self {
            phi: x[0].tanh(),
            v: x[1].exp(),
            p: sigmoid(x[2]),
        }
    }

    pub fn theta(&self) -> Result<ArParams> {
        ArParams::new(self.phi, self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedDraws {
    pub draws: Vec<Draw>,
    /// Unnormalised log importance weights (target minus proposal).
    pub log_weights: Vec<f64>,
    pub effective_sample_size: f64,
    /// Posterior mode found before sampling, when a mode search was run.
    pub mode: Option<Draw>,
    /// Set when the effective sample size falls below 1% of the draw count.
    pub warning: Option<String>,
}

impl WeightedDraws {
    pub fn new(draws: Vec<Draw>, log_weights: Vec<f64>) -> Result<Self> {
        if draws.len() != log_weights.len() || draws.is_empty() {
            return Err(Error::invalid(format!(
                "{} draws with {} weights",
                draws.len(),
                log_weights.len()
            )));
        }
        if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
            return Err(Error::numerical("importance log-weight is NaN or +inf"));
        }
        let ess = effective_sample_size(&log_weights);
        let n = draws.len();
        let warning = (ess < 0.01 * n as f64).then(|| {
            format!("importance weights are degenerate: ESS {ess:.1} from {n} draws")
        });
        Ok(Self {
            draws,
            log_weights,
            effective_sample_size: ess,
            mode: None,
            warning,
        })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        normalize_log_weights(&self.log_weights)
    }
}

pub fn normalize_log_weights(log_weights: &[f64]) -> Vec<f64> {
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = log_weights.iter().map(|w| (w - m).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

pub fn effective_sample_size(log_weights: &[f64]) -> f64 {
    let w = normalize_log_weights(log_weights);
    1.0 / w.iter().map(|x| x * x).sum::<f64>()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(exp(a) + exp(b))`
fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Joint log-posterior of `(atanh phi, ln v, logit p)` with the mean shifts integrated out.
pub struct LogPosterior<'a> {
    views: Vec<SeriesView<'a>>,
    prior: ParametricPrior,
}

impl<'a> LogPosterior<'a> {
    pub fn new(panel: &'a SeriesPanel, prior: ParametricPrior) -> Result<Self> {
        if panel.is_empty() {
            return Err(Error::invalid("panel is empty"));
        }
        prior.validate()?;
        Ok(Self {
            views: panel.views(),
            prior,
        })
    }

    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        let phi = x[0].tanh();
        let v = x[1].exp();
        let Ok(theta) = ArParams::new(phi, v) else {
            return f64::NEG_INFINITY;
        };
        let ln_p = -(-x[2]).exp().ln_1p();
        let ln_q = -x[2].exp().ln_1p();
        let scale = self.prior.scale();
        // Collect then sum serially so the result does not depend on thread scheduling.
        let terms: Vec<f64> = self
            .views
            .par_iter()
            .map(|y| {
                let (l0, l1) = null_and_shift_loglik(*y, &theta, scale);
                log_add(ln_q + l0, ln_p + l1)
            })
            .collect();
        let lik: f64 = terms.iter().sum();
        // Uniform prior on p; Jacobians of tanh, exp and the logistic map.
        self.prior.ar.ln_pdf_unconstrained([x[0], x[1]]) + lik + ln_p + ln_q
    }

    /// Start point from pooled lag-1 moments.
    pub fn moment_start(&self) -> [f64; 3] {
        let (mut s0, mut s1, mut n0) = (0.0, 0.0, 0usize);
        for y in &self.views {
            for k in 0..y.len() {
                s0 += y.values[k] * y.values[k];
                n0 += 1;
                if k > 0 && y.times[k] - y.times[k - 1] == 1 {
                    s1 += y.values[k] * y.values[k - 1];
                }
            }
        }
        let var = (s0 / n0.max(1) as f64).max(1e-6);
        let r = if s0 > 0.0 { (s1 / s0).clamp(-0.9, 0.95) } else { 0.0 };
        [r.atanh(), (var * (1.0 - r * r)).max(1e-6).ln(), logit(0.1)]
    }
}

fn numeric_gradient<F: Fn(&[f64; 3]) -> f64>(f: &F, x: &[f64; 3], h: f64) -> [f64; 3] {
    let mut g = [0.0; 3];
    for i in 0..3 {
        let hh = h * x[i].abs().max(1.0);
        let mut hi = *x;
        let mut lo = *x;
        hi[i] += hh;
        lo[i] -= hh;
        g[i] = (f(&hi) - f(&lo)) / (2.0 * hh);
    }
    g
}

fn numeric_hessian<F: Fn(&[f64; 3]) -> f64>(f: &F, x: &[f64; 3], h: f64) -> Matrix3<f64> {
    let mut hess = Matrix3::zeros();
    let fx = f(x);
    for i in 0..3 {
        for j in i..3 {
            let v = if i == j {
                let mut a = *x;
                let mut b = *x;
                a[i] += h;
                b[i] -= h;
                (f(&a) - 2.0 * fx + f(&b)) / (h * h)
            } else {
                let shifted = |di: f64, dj: f64| {
                    let mut z = *x;
                    z[i] += di;
                    z[j] += dj;
                    f(&z)
                };
                (shifted(h, h) - shifted(h, -h) - shifted(-h, h) + shifted(-h, -h)) / (4.0 * h * h)
            };
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Maximise `f` by BFGS with numerical gradients and Armijo backtracking.
pub fn maximize_bfgs<F: Fn(&[f64; 3]) -> f64>(f: &F, start: [f64; 3]) -> Result<[f64; 3]> {
    let neg = |x: &[f64; 3]| -f(x);
    let h = 1e-5;
    let mut x = start;
    let mut fx = neg(&x);
    if !fx.is_finite() {
        return Err(Error::numerical(format!("log-posterior is not finite at start {start:?}")));
    }
    let mut g = Vector3::from(numeric_gradient(&neg, &x, h));
    let mut inv_h = Matrix3::identity();
    for _ in 0..MAX_BFGS_ITERS {
        if g.amax() < 1e-4 {
            return Ok(x);
        }
        let mut d = -(inv_h * g);
        if g.dot(&d) >= 0.0 {
            inv_h = Matrix3::identity();
            d = -g;
        }
        let slope = g.dot(&d);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = [x[0] + t * d[0], x[1] + t * d[1], x[2] + t * d[2]];
            let ft = neg(&trial);
            if ft.is_finite() && ft <= fx + 1e-4 * t * slope {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // No descent possible along d: treat as converged if the gradient is at noise level.
            if g.amax() < 1e-2 {
                return Ok(x);
            }
            return Err(Error::Convergence {
                iterations: MAX_BFGS_ITERS,
                last: x.to_vec(),
            });
        };
        let g_new = Vector3::from(numeric_gradient(&neg, &x_new, h));
        let s = Vector3::new(x_new[0] - x[0], x_new[1] - x[1], x_new[2] - x[2]);
        let yv = g_new - g;
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = Matrix3::identity();
            inv_h = (i - rho * s * yv.transpose()) * inv_h * (i - rho * yv * s.transpose())
                + rho * s * s.transpose();
        }
        if x_new.iter().any(|v| v.abs() > BFGS_BOUND) {
            return Err(Error::Convergence {
                iterations: MAX_BFGS_ITERS,
                last: x_new.to_vec(),
            });
        }
        let small_step = s.amax() < 1e-9;
        let flat = (fx - f_new).abs() < 1e-12 * (1.0 + fx.abs());
        x = x_new;
        fx = f_new;
        g = g_new;
        if small_step && flat {
            return Ok(x);
        }
    }
    Err(Error::Convergence {
        iterations: MAX_BFGS_ITERS,
        last: x.to_vec(),
    })
}

/// Multivariate Student-t on R^3.
#[derive(Debug, Clone, PartialEq)]
pub struct MvStudentT {
    mean: Vector3<f64>,
    chol: Matrix3<f64>,
    df: f64,
    ln_norm: f64,
}

impl MvStudentT {
    pub fn new(mean: [f64; 3], scale: Matrix3<f64>, df: f64) -> Result<Self> {
        let chol = scale
            .cholesky()
            .ok_or_else(|| Error::numerical("proposal scale matrix is not positive definite"))?
            .l();
        let d = 3.0;
        let ln_det_half: f64 = chol.diagonal().iter().map(|x| x.ln()).sum();
        let ln_norm = ln_gamma((df + d) / 2.0)
            - ln_gamma(df / 2.0)
            - 0.5 * d * (df * std::f64::consts::PI).ln()
            - ln_det_half;
        Ok(Self {
            mean: Vector3::from(mean),
            chol,
            df,
            ln_norm,
        })
    }

    pub fn ln_pdf(&self, x: &[f64; 3]) -> f64 {
        let diff = Vector3::from(*x) - self.mean;
        let z = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has positive diagonal");
        self.ln_norm - 0.5 * (self.df + 3.0) * (z.norm_squared() / self.df).ln_1p()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        let z = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let w: f64 = ChiSquared::new(self.df).expect("positive df").sample(rng);
        let x = self.mean + self.chol * z * (self.df / w).sqrt();
        [x[0], x[1], x[2]]
    }
}

/// Draw `n` points from `proposal` and weight them against the unnormalised log-density `target`.
pub fn importance_sample<F, R>(target: F, proposal: &MvStudentT, n: usize, rng: &mut R) -> Result<WeightedDraws>
where
    F: Fn(&[f64; 3]) -> f64 + Sync,
    R: Rng + ?Sized,
{
    let xs: Vec<[f64; 3]> = (0..n).map(|_| proposal.sample(rng)).collect();
    let log_weights: Vec<f64> = xs
        .par_iter()
        .map(|x| {
            let t = target(x);
            if t.is_finite() {
                t - proposal.ln_pdf(x)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    if log_weights.iter().all(|w| *w == f64::NEG_INFINITY) {
        return Err(Error::numerical("every importance draw has zero target density"));
    }
    let draws = xs.iter().map(Draw::from_unconstrained).collect();
    WeightedDraws::new(draws, log_weights)
}

/// Proposal covariance from the negative Hessian, with eigenvalues clipped if needed.
fn proposal_scale(neg_hessian: Matrix3<f64>) -> Matrix3<f64> {
    let sym = 0.5 * (neg_hessian + neg_hessian.transpose());
    if let Some(inv) = sym.try_inverse().filter(|m| m.cholesky().is_some()) {
        return inv;
    }
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.amax().max(1e-8);
    let clipped = eig.eigenvalues.map(|l| 1.0 / l.max(1e-6 * top));
    eig.eigenvectors * Matrix3::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

pub fn build_importance_sampler(
    prior: &ParametricPrior,
    panel: &SeriesPanel,
    n_draws: usize,
    seed: u64,
) -> Result<WeightedDraws> {
    if n_draws < 100 {
        return Err(Error::invalid(format!("need at least 100 importance draws, got {n_draws}")));
    }
    let post = LogPosterior::new(panel, *prior)?;
    let f = |x: &[f64; 3]| post.eval(x);
    let mode = maximize_bfgs(&f, post.moment_start())?;
    let neg_hess = -numeric_hessian(&f, &mode, 1e-3);
    let proposal = MvStudentT::new(mode, proposal_scale(neg_hess), PROPOSAL_DF)?;
    let mut rng = derived_rng(seed, &[stage::IMPORTANCE]);
    let mut out = importance_sample(f, &proposal, n_draws, &mut rng)?;
    out.mode = Some(Draw::from_unconstrained(&mode));
    if let Some(w) = &out.warning {
        log::warn!("{w}");
    }
    Ok(out)
}

/// Posterior probability of the alternative for one draw: `p BF / (p BF + 1 - p)`.
pub fn draw_inclusion(p: f64, log_bf: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    sigmoid(p.ln() - (-p).ln_1p() + log_bf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InclusionSummary {
    pub unit_ids: Vec<String>,
    pub p: Vec<f64>,
    pub mc_stderr: Vec<f64>,
    pub flags_50: Vec<bool>,
    pub flags_90: Vec<bool>,
}

impl InclusionSummary {
    pub fn new(unit_ids: Vec<String>, p: Vec<f64>, mc_stderr: Vec<f64>) -> Result<Self> {
        if unit_ids.len() != p.len() || p.len() != mc_stderr.len() {
            return Err(Error::invalid("inclusion summary columns differ in length"));
        }
        if let Some(x) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::numerical(format!("inclusion probability {x} outside [0,1]")));
        }
        let flags_50 = classify_flags(&p, 0.5);
        let flags_90 = classify_flags(&p, 0.9);
        Ok(Self {
            unit_ids,
            p,
            mc_stderr,
            flags_50,
            flags_90,
        })
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn count_at(&self, threshold: f64) -> usize {
        classify_flags(&self.p, threshold).iter().filter(|&&f| f).count()
    }

    /// `unit_id,p_i,mc_stderr,flag50,flag90` rows.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "unit_id,p_i,mc_stderr,flag50,flag90")?;
        for i in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.unit_ids[i],
                self.p[i],
                self.mc_stderr[i],
                u8::from(self.flags_50[i]),
                u8::from(self.flags_90[i])
            )?;
        }
        Ok(())
    }
}

/// `flag_i = p_i >= threshold`.
pub fn classify_flags(p: &[f64], threshold: f64) -> Vec<bool> {
    p.iter().map(|&x| x >= threshold).collect()
}

pub fn inclusion_probabilities_parametric(
    draws: &WeightedDraws,
    panel: &SeriesPanel,
    prior: &ParametricPrior,
) -> Result<InclusionSummary> {
    prior.validate()?;
    let weights = draws.normalized_weights();
    let thetas: Vec<Option<ArParams>> = draws.draws.iter().map(|d| d.theta().ok()).collect();
    let scale = prior.scale();
    let rows: Vec<Result<(f64, f64)>> = panel
        .series()
        .par_iter()
        .map(|s| {
            let y = s.view();
            let mut xs = Vec::with_capacity(weights.len());
            for (k, (d, theta)) in draws.draws.iter().zip(&thetas).enumerate() {
                let x = match theta {
                    // Zero-weight draws at the parameter boundary contribute nothing.
                    None if weights[k] == 0.0 => 0.0,
                    None => {
                        return Err(Error::numerical(format!(
                            "unit {}: draw {k} has invalid AR parameters",
                            s.unit_id()
                        )))
                    }
                    Some(theta) => {
                        let (l0, l1) = null_and_shift_loglik(y, theta, scale);
                        let x = draw_inclusion(d.p, l1 - l0);
                        if x.is_nan() {
                            return Err(Error::numerical(format!(
                                "unit {}: Bayes factor is NaN at draw {k}",
                                s.unit_id()
                            )));
                        }
                        x
                    }
                };
                xs.push(x);
            }
            let mean: f64 = weights.iter().zip(&xs).map(|(w, x)| w * x).sum();
            let var: f64 = weights
                .iter()
                .zip(&xs)
                .map(|(w, x)| w * w * (x - mean) * (x - mean))
                .sum();
            Ok((mean.clamp(0.0, 1.0), var.sqrt()))
        })
        .collect();
    let mut p = Vec::with_capacity(rows.len());
    let mut se = Vec::with_capacity(rows.len());
    for r in rows {
        let (a, b) = r?;
        p.push(a);
        se.push(b);
    }
    let ids = panel.series().iter().map(|s| s.unit_id().to_string()).collect();
    InclusionSummary::new(ids, p, se)
}

const MODE_SEARCH_TAIL: f64 = 0.005;

fn weighted_quantile(pairs: &[(f64, f64)], q: f64) -> f64 {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = 0.0;
    for (z, w) in &sorted {
        acc += w;
        if acc >= q {
            return *z;
        }
    }
    sorted.last().map_or(f64::NAN, |x| x.0)
}

/// Mode of a weighted Gaussian KDE of `p`, built on the logit scale and mapped
/// back with its Jacobian. Bandwidth is Silverman's rule with the effective
/// sample size in place of the draw count. The search is limited to the
/// central 99% of the weighted draws.
pub fn posterior_p_mode(draws: &WeightedDraws) -> Result<f64> {
    let w = draws.normalized_weights();
    let ess = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
    if ess < 10.0 {
        return Err(Error::numerical(format!(
            "effective sample size {ess:.2} is too small for a density estimate"
        )));
    }
    let pairs: Vec<(f64, f64)> = draws
        .draws
        .iter()
        .zip(&w)
        .filter(|(_, &wk)| wk > 0.0)
        .map(|(d, &wk)| (logit(d.p.clamp(1e-300, 1.0 - 1e-16)), wk))
        .collect();
    let mean: f64 = pairs.iter().map(|(z, wk)| z * wk).sum();
    let var: f64 = pairs.iter().map(|(z, wk)| wk * (z - mean).powi(2)).sum();
    let sd = var.sqrt();
    if sd < 1e-12 {
        return Ok(sigmoid(mean));
    }
    let h = 1.06 * sd * ess.powf(-0.2);

    let log_density = |z: f64| {
        let terms: Vec<f64> = pairs
            .iter()
            .map(|(zk, wk)| wk.ln() - 0.5 * ((z - zk) / h).powi(2))
            .collect();
        let p = sigmoid(z);
        crate::sticks::log_sum_exp(&terms) - p.ln() - (1.0 - p).ln()
    };

    // The Jacobian grows like e^|z|, so a lone far-tail draw would dominate;
    // search only where the weighted draws put their central 99%.
    let lo = weighted_quantile(&pairs, MODE_SEARCH_TAIL);
    let hi = weighted_quantile(&pairs, 1.0 - MODE_SEARCH_TAIL);
    if hi - lo < 1e-12 {
        return Ok(sigmoid(lo));
    }
    let steps = 2000;
    let dz = (hi - lo) / steps as f64;
    let (mut best_z, mut best) = (lo, f64::NEG_INFINITY);
    for k in 0..=steps {
        let z = lo + k as f64 * dz;
        let v = log_density(z);
        if v > best {
            best = v;
            best_z = z;
        }
    }
    // Golden-section refinement inside the bracketing grid cells.
    let (mut a, mut b) = (best_z - dz, best_z + dz);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if log_density(c) > log_density(d) {
            b = d;
        } else {
            a = c;
        }
    }
    Ok(sigmoid(0.5 * (a + b)))
}
