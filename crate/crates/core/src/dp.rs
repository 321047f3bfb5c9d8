//! Truncated Dirichlet-process mixture of AR(1) laws for the residuals.
//!
//! Blocked Gibbs sampling over `L` stick-breaking atoms. Assignments and
//! sticks are drawn from their exact conditionals; each atom `(phi, v)` takes
//! random-walk Metropolis steps on `(atanh phi, ln v)` whose scale adapts
//! during burn-in only.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar::{Ar1Consts, ArParams};
use crate::error::{Error, Result};
use crate::panel::{SeriesPanel, SeriesView};
use crate::priors::ArPrior;
use crate::rng::{derived_rng, stage};
use crate::sticks::{counts, sample_log_categorical, StickState, Sticks};

pub const DEFAULT_TRUNCATION: usize = 60;
const TARGET_ACCEPT: f64 = 0.25;
const INITIAL_LOG_SCALE: f64 = 0.52;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualOptions {
    /// Metropolis steps per atom per sweep.
    pub mh_steps: usize,
    /// Treat the likelihood as constant, so the sweep targets the prior.
    pub prior_only: bool,
    /// Hold `phi` fixed at this value and update `v` alone.
    pub freeze_phi: Option<f64>,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self {
            mh_steps: 3,
            prior_only: false,
            freeze_phi: None,
        }
    }
}

/// Which random streams a sweep draws from, and whether proposals adapt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepContext {
    pub seed: u64,
    pub sweep: u64,
    pub adapt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpResidualState {
    pub stick: StickState,
    pub assignments: Vec<usize>,
    pub alpha: f64,
    pub base: ArPrior,
    log_scales: Vec<f64>,
}

impl DpResidualState {
    pub fn new(stick: StickState, assignments: Vec<usize>, alpha: f64, base: ArPrior) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::domain(format!("alpha must be positive, got {alpha}")));
        }
        base.validate()?;
        if let Some(a) = assignments.iter().find(|&&a| a >= stick.len()) {
            return Err(Error::invalid(format!("assignment {a} exceeds {} atoms", stick.len())));
        }
        let log_scales = vec![INITIAL_LOG_SCALE; stick.len()];
        Ok(Self {
            stick,
            assignments,
            alpha,
            base,
            log_scales,
        })
    }

    pub fn truncation(&self) -> usize {
        self.stick.len()
    }

    /// AR parameters of the atom unit `i` currently belongs to.
    pub fn theta_of(&self, unit: usize) -> &ArParams {
        &self.stick.atoms()[self.assignments[unit]]
    }

    pub fn counts(&self) -> Vec<usize> {
        counts(self.assignments.iter().copied(), self.truncation())
    }

    /// Current random-walk multipliers, one per atom.
    pub fn proposal_scales(&self) -> Vec<f64> {
        self.log_scales.iter().map(|s| s.exp()).collect()
    }
}

pub fn init_residual_state(
    panel: &SeriesPanel,
    alpha: f64,
    base: ArPrior,
    truncation: usize,
    seed: u64,
) -> Result<DpResidualState> {
    init_residual_units(panel.len(), alpha, base, truncation, seed)
}

pub(crate) fn init_residual_units(
    n_units: usize,
    alpha: f64,
    base: ArPrior,
    truncation: usize,
    seed: u64,
) -> Result<DpResidualState> {
    base.validate()?;
    if truncation < 2 {
        return Err(Error::invalid("residual truncation must be at least 2"));
    }
    let mut rng = derived_rng(seed, &[stage::INIT, 0]);
    let atoms = (0..truncation).map(|_| base.sample(&mut rng)).collect();
    let stick = Sticks::from_prior(alpha, atoms, &mut rng)?;
    let log_w: Vec<f64> = stick.weights().iter().map(|w| w.ln()).collect();
    let assignments = (0..n_units)
        .map(|_| sample_log_categorical(&log_w, &mut rng).expect("weights sum to one"))
        .collect();
    DpResidualState::new(stick, assignments, alpha, base)
}

pub fn gibbs_sweep_residual(
    state: &mut DpResidualState,
    residual_panel: &SeriesPanel,
    ctx: SweepContext,
    opts: &ResidualOptions,
) -> Result<()> {
    let views = residual_panel.views();
    sweep_views(state, &views, ctx, opts)
}

/// One sweep given residual series `z_i`: assignments, sticks, atoms.
pub(crate) fn sweep_views(
    state: &mut DpResidualState,
    z: &[SeriesView<'_>],
    ctx: SweepContext,
    opts: &ResidualOptions,
) -> Result<()> {
    if z.len() != state.assignments.len() {
        return Err(Error::invalid(format!(
            "{} residual series for {} assigned units",
            z.len(),
            state.assignments.len()
        )));
    }
    let l = state.truncation();

    // (a) assignments
    let log_w: Vec<f64> = state.stick.weights().iter().map(|w| w.ln()).collect();
    let consts: Vec<Ar1Consts> = state.stick.atoms().iter().map(Ar1Consts::from).collect();
    let assignments: Result<Vec<usize>> = z
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let mut rng = derived_rng(ctx.seed, &[stage::RESIDUAL_ASSIGN, ctx.sweep, i as u64]);
            let mut lp = log_w.clone();
            if !opts.prior_only {
                for (k, c) in consts.iter().enumerate() {
                    if lp[k] == f64::NEG_INFINITY {
                        continue;
                    }
                    let ll = c.loglik_with(y.times, |t| y.values[t]);
                    if ll.is_nan() || ll == f64::INFINITY {
                        return Err(Error::numerical(format!(
                            "residual assignment: log-likelihood of unit {i} under atom {k} is {ll}"
                        )));
                    }
                    lp[k] += ll;
                }
            }
            sample_log_categorical(&lp, &mut rng).ok_or_else(|| {
                Error::numerical(format!("residual assignment: unit {i} has zero mass under every atom"))
            })
        })
        .collect();
    state.assignments = assignments?;

    // (b) sticks
    let n = counts(state.assignments.iter().copied(), l);
    let mut rng = derived_rng(ctx.seed, &[stage::RESIDUAL_STICKS, ctx.sweep]);
    let alpha = state.alpha;
    state.stick.update_sticks(&n, alpha, &mut rng);

    // (c) atoms
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); l];
    for (i, &a) in state.assignments.iter().enumerate() {
        members[a].push(i);
    }
    let base = state.base;
    let atoms = state.stick.atoms().to_vec();
    let updated: Result<Vec<(ArParams, f64)>> = (0..l)
        .into_par_iter()
        .map(|k| {
            let mut rng = derived_rng(ctx.seed, &[stage::RESIDUAL_ATOMS, ctx.sweep, k as u64]);
            let data: Vec<SeriesView<'_>> = members[k].iter().map(|&i| z[i]).collect();
            let mut log_scale = state.log_scales[k];
            let theta = if data.is_empty() && opts.freeze_phi.is_none() {
                base.sample(&mut rng)
            } else {
                let (theta, acc) = update_atom(&atoms[k], &data, &base, log_scale.exp(), opts, &mut rng)
                    .map_err(|e| match e {
                        Error::Numerical(m) => Error::numerical(format!("residual atom {k}: {m}")),
                        other => other,
                    })?;
                if ctx.adapt {
                    let gain = (ctx.sweep as f64 + 1.0).powf(-0.6);
                    log_scale = (log_scale + gain * (acc - TARGET_ACCEPT)).clamp(-6.0, 3.0);
                }
                theta
            };
            Ok((theta, log_scale))
        })
        .collect();
    for (k, (theta, s)) in updated?.into_iter().enumerate() {
        state.stick.atoms_mut()[k] = theta;
        state.log_scales[k] = s;
    }
    Ok(())
}

/// Log target of one atom on `(atanh phi, ln v)`: base prior with Jacobian
/// times the likelihood of its units' residuals.
fn atom_log_target(
    x: [f64; 2],
    data: &[SeriesView<'_>],
    base: &ArPrior,
    opts: &ResidualOptions,
) -> f64 {
    let Ok(theta) = ArParams::from_unconstrained(x) else {
        return f64::NEG_INFINITY;
    };
    let prior = match opts.freeze_phi {
        Some(_) => base.ln_pdf_v(theta.v()) + x[1],
        None => base.ln_pdf_unconstrained(x),
    };
    if opts.prior_only || prior == f64::NEG_INFINITY {
        return prior;
    }
    let c = Ar1Consts::from(&theta);
    prior + data.iter().map(|y| c.loglik_with(y.times, |t| y.values[t])).sum::<f64>()
}

/// `mh_steps` random-walk Metropolis steps; returns the new atom and the acceptance rate.
pub(crate) fn update_atom<R: Rng + ?Sized>(
    current: &ArParams,
    data: &[SeriesView<'_>],
    base: &ArPrior,
    scale: f64,
    opts: &ResidualOptions,
    rng: &mut R,
) -> Result<(ArParams, f64)> {
    let mut x = match opts.freeze_phi {
        Some(phi) => [phi.atanh(), current.v().ln()],
        None => current.to_unconstrained(),
    };
    let mut lp = atom_log_target(x, data, base, opts);
    if !lp.is_finite() {
        return Err(Error::numerical(format!(
            "log target is {lp} at phi={}, v={}",
            current.phi(),
            current.v()
        )));
    }
    // Posterior sd on this scale shrinks like 1/sqrt(number of observations).
    let m: usize = if opts.prior_only { 0 } else { data.iter().map(|y| y.len()).sum() };
    let step = scale * (2.0 / (m as f64 + 4.0)).sqrt();
    let mut accepted = 0usize;
    let steps = opts.mh_steps.max(1);
    for _ in 0..steps {
        let mut prop = x;
        if opts.freeze_phi.is_none() {
            prop[0] += step * rng.sample::<f64, _>(StandardNormal);
        }
        prop[1] += step * rng.sample::<f64, _>(StandardNormal);
        let lq = atom_log_target(prop, data, base, opts);
        if lq.is_nan() {
            return Err(Error::numerical(format!("log target is NaN at {prop:?}")));
        }
        if rng.random::<f64>().ln() < lq - lp {
            x = prop;
            lp = lq;
            accepted += 1;
        }
    }
    Ok((ArParams::from_unconstrained(x)?, accepted as f64 / steps as f64))
}
