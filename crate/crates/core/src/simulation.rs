//! Synthetic panels with known truth, and error accounting against that truth.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ar::{stationary_variance, ArParams};
use crate::error::{Error, Result};
use crate::gp::{GpFactor, GpKernelParams};
use crate::panel::{ObservedSeries, SeriesPanel, TimeGrid};
use crate::priors::ArPrior;
use crate::rng::{derived_rng, stage};
use crate::sticks::{sample_log_categorical, StickState, Sticks};

/// How nonnull units get their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySource {
    /// A constant level drawn `N(0, sigma2)`.
    Constant { sigma2: f64 },
    /// A zero-mean GP path over the unit's times.
    Gp { kernel: GpKernelParams },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanShift {
    pub p_true: f64,
    pub source: TrajectorySource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureScenario {
    components: Vec<(ArParams, f64)>,
    n_units: usize,
    t_len: usize,
    start_time: i64,
    mean_shift: Option<MeanShift>,
}

impl MixtureScenario {
    pub fn new(
        components: Vec<(ArParams, f64)>,
        n_units: usize,
        t_len: usize,
        mean_shift: Option<MeanShift>,
    ) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("scenario has no components"));
        }
        if n_units == 0 || t_len == 0 {
            return Err(Error::invalid("scenario needs positive N and T"));
        }
        let total: f64 = components.iter().map(|c| c.1).sum();
        if components.iter().any(|c| c.1.is_nan() || c.1 < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("component probabilities must be nonnegative and sum to 1, got {total}")));
        }
        if let Some(m) = &mean_shift {
            if !(0.0..=1.0).contains(&m.p_true) {
                return Err(Error::domain(format!("p_true must lie in [0, 1], got {}", m.p_true)));
            }
            if let TrajectorySource::Constant { sigma2 } = m.source {
                if !(sigma2.is_finite() && sigma2 >= 0.0) {
                    return Err(Error::domain(format!("sigma2 must be nonnegative, got {sigma2}")));
                }
            }
        }
        Ok(Self {
            components,
            n_units,
            t_len,
            start_time: 1,
            mean_shift,
        })
    }

    /// Equiprobable components over the product `phis x vs`.
    pub fn grid(phis: &[f64], vs: &[f64], n_units: usize, t_len: usize) -> Result<Self> {
        let k = (phis.len() * vs.len()) as f64;
        let mut comps = Vec::new();
        for &phi in phis {
            for &v in vs {
                comps.push((ArParams::new(phi, v)?, 1.0 / k));
            }
        }
        normalize(&mut comps);
        Self::new(comps, n_units, t_len, None)
    }

    pub fn with_start_time(mut self, start: i64) -> Self {
        self.start_time = start;
        self
    }

    pub fn with_mean_shift(mut self, shift: Option<MeanShift>) -> Result<Self> {
        self.mean_shift = shift;
        Self::new(self.components, self.n_units, self.t_len, self.mean_shift).map(|s| s.with_start_time(self.start_time))
    }

    pub fn components(&self) -> &[(ArParams, f64)] {
        &self.components
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn start_time(&self) -> i64 {
        self.start_time
    }

    pub fn mean_shift(&self) -> Option<&MeanShift> {
        self.mean_shift.as_ref()
    }

    pub fn times(&self) -> Vec<i64> {
        (self.start_time..self.start_time + self.t_len as i64).collect()
    }

    /// Parse a scenario file.
    ///
    /// ```text
    /// N = 500
    /// T = 40
    /// component = 0.5, 0.25, 1      # phi, v, relative weight
    /// grid_phi = 0.2, 0.95          # or a product grid, equiprobable
    /// grid_v = 0.05, 0.5
    /// p_true = 0.2                  # optional mean shifts
    /// trajectory = constant         # or gp
    /// sigma2 = 1
    /// kappa1 = 1.25
    /// kappa2 = 13
    /// start = 1
    /// seed = 7
    /// ```
    ///
    /// Component weights are normalised. Returns the scenario and the optional seed.
    pub fn parse(text: &str) -> Result<(Self, Option<u64>)> {
        let mut comps = Vec::new();
        let (mut n, mut t, mut start, mut seed) = (None, None, 1i64, None);
        let (mut grid_phi, mut grid_v): (Option<Vec<f64>>, Option<Vec<f64>>) = (None, None);
        let (mut p_true, mut traj, mut sigma2, mut k1, mut k2) = (None, "constant".to_string(), 1.0, 1.25, 13.0);
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse(format!("scenario line {}: {msg}: {raw:?}", ln + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            let v = v.trim();
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| err("malformed number"));
            let list = |s: &str| s.split(',').map(num).collect::<Result<Vec<f64>>>();
            match k.trim() {
                "N" | "n" => n = Some(v.parse::<usize>().map_err(|_| err("malformed N"))?),
                "T" | "t" => t = Some(v.parse::<usize>().map_err(|_| err("malformed T"))?),
                "start" => start = v.parse().map_err(|_| err("malformed start"))?,
                "seed" => seed = Some(v.parse().map_err(|_| err("malformed seed"))?),
                "component" => {
                    let xs = list(v)?;
                    if xs.len() != 3 {
                        return Err(err("component needs phi, v, weight"));
                    }
                    comps.push((ArParams::new(xs[0], xs[1])?, xs[2]));
                }
                "grid_phi" => grid_phi = Some(list(v)?),
                "grid_v" => grid_v = Some(list(v)?),
                "p_true" => p_true = Some(num(v)?),
                "trajectory" => traj = v.to_string(),
                "sigma2" => sigma2 = num(v)?,
                "kappa1" => k1 = num(v)?,
                "kappa2" => k2 = num(v)?,
                other => return Err(err(&format!("unknown key {other:?}"))),
            }
        }
        match (grid_phi, grid_v) {
            (Some(ps), Some(vs)) => {
                for &phi in &ps {
                    for &v in &vs {
                        comps.push((ArParams::new(phi, v)?, 1.0));
                    }
                }
            }
            (None, None) => {}
            _ => return Err(Error::Parse("grid_phi and grid_v must be given together".into())),
        }
        normalize(&mut comps);
        let mean_shift = match p_true {
            None => None,
            Some(p) => Some(MeanShift {
                p_true: p,
                source: match traj.as_str() {
                    "constant" => TrajectorySource::Constant { sigma2 },
                    "gp" => TrajectorySource::Gp { kernel: GpKernelParams::new(k1, k2)? },
                    other => return Err(Error::Parse(format!("unknown trajectory source {other:?}"))),
                },
            }),
        };
        let n = n.ok_or_else(|| Error::Parse("scenario is missing N".into()))?;
        let t = t.ok_or_else(|| Error::Parse("scenario is missing T".into()))?;
        Ok((Self::new(comps, n, t, mean_shift)?.with_start_time(start), seed))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<(Self, Option<u64>)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn normalize(comps: &mut [(ArParams, f64)]) {
    let total: f64 = comps.iter().map(|c| c.1).sum();
    if total > 0.0 {
        for c in comps.iter_mut() {
            c.1 /= total;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthLabels {
    pub nonnull: Vec<bool>,
    pub component: Vec<usize>,
}

impl TruthLabels {
    pub fn len(&self) -> usize {
        self.nonnull.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nonnull.is_empty()
    }

    pub fn nonnull_count(&self) -> usize {
        self.nonnull.iter().filter(|&&b| b).count()
    }

    pub fn write_csv<W: Write>(&self, panel: &SeriesPanel, mut w: W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "unit_id,nonnull,component")?;
        for (i, s) in panel.series().iter().enumerate() {
            writeln!(w, "{},{},{}", s.unit_id(), u8::from(self.nonnull[i]), self.component[i])?;
        }
        Ok(())
    }
}

/// Stationary AR(1) path at consecutive integer times.
pub fn simulate_ar1<R: Rng + ?Sized>(theta: &ArParams, t_len: usize, rng: &mut R) -> Vec<f64> {
    let sd0 = stationary_variance(theta).sqrt();
    let sdv = theta.v().sqrt();
    let mut y = Vec::with_capacity(t_len);
    let mut x = sd0 * rng.sample::<f64, _>(StandardNormal);
    for k in 0..t_len {
        if k > 0 {
            x = theta.phi() * x + sdv * rng.sample::<f64, _>(StandardNormal);
        }
        y.push(x);
    }
    y
}

fn unit_id(i: usize) -> String {
    format!("u{i:05}")
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let lw: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    sample_log_categorical(&lw, rng).expect("weights sum to one")
}

pub fn generate_mixture_panel(scenario: &MixtureScenario, seed: u64) -> Result<(SeriesPanel, TruthLabels)> {
    let times = scenario.times();
    let weights: Vec<f64> = scenario.components.iter().map(|c| c.1).collect();
    let gp = match scenario.mean_shift.map(|m| m.source) {
        Some(TrajectorySource::Gp { kernel }) => Some(GpFactor::new(kernel, &times)?),
        _ => None,
    };
    let rows: Vec<(Vec<f64>, bool, usize)> = (0..scenario.n_units)
        .into_par_iter()
        .map(|i| {
            let mut urng = derived_rng(seed, &[stage::SIM_UNIT, i as u64]);
            let c = pick(&weights, &mut urng);
            let mut nrng = derived_rng(seed, &[stage::SIM_NOISE, i as u64]);
            let mut y = simulate_ar1(&scenario.components[c].0, scenario.t_len, &mut nrng);
            let mut nonnull = false;
            if let Some(m) = &scenario.mean_shift {
                nonnull = urng.random::<f64>() < m.p_true;
                if nonnull {
                    let mut srng = derived_rng(seed, &[stage::SIM_SIGNAL, i as u64]);
                    match m.source {
                        TrajectorySource::Constant { sigma2 } => {
                            let level = sigma2.sqrt() * srng.sample::<f64, _>(StandardNormal);
                            y.iter_mut().for_each(|v| *v += level);
                        }
                        TrajectorySource::Gp { .. } => {
                            let f = gp.as_ref().expect("factor built for GP source").sample_prior(&mut srng);
                            y.iter_mut().zip(f).for_each(|(v, s)| *v += s);
                        }
                    }
                }
            }
            (y, nonnull, c)
        })
        .collect();
    assemble(rows, &times)
}

fn assemble(rows: Vec<(Vec<f64>, bool, usize)>, times: &[i64]) -> Result<(SeriesPanel, TruthLabels)> {
    let mut series = Vec::with_capacity(rows.len());
    let mut truth = TruthLabels {
        nonnull: Vec::with_capacity(rows.len()),
        component: Vec::with_capacity(rows.len()),
    };
    for (i, (y, nn, c)) in rows.into_iter().enumerate() {
        series.push(ObservedSeries::new(unit_id(i), times.to_vec(), y)?);
        truth.nonnull.push(nn);
        truth.component.push(c);
    }
    Ok((SeriesPanel::new(series, 1)?, truth))
}

/// A residual distribution drawn from the truncated DP prior.
pub fn draw_residual_distribution(alpha: f64, base: &ArPrior, truncation: usize, seed: u64) -> Result<StickState> {
    base.validate()?;
    let mut rng = derived_rng(seed, &[stage::SIM_RESIDUAL_G]);
    let atoms = (0..truncation).map(|_| base.sample(&mut rng)).collect();
    Sticks::from_prior(alpha, atoms, &mut rng)
}

/// Seeds of a prior study. Reusing `noise` reproduces the same residual vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StudySeeds {
    pub signal: u64,
    pub noise: u64,
}

/// Units with GP trajectories at rate `p_true`, plus residual noise from `residual_g`.
pub fn generate_prior_study(
    p_true: f64,
    residual_g: &StickState,
    n_units: usize,
    grid: &TimeGrid,
    kernel: GpKernelParams,
    seeds: StudySeeds,
) -> Result<(SeriesPanel, TruthLabels)> {
    if !(p_true > 0.0 && p_true < 1.0) {
        return Err(Error::domain(format!("p_true must lie in (0, 1), got {p_true}")));
    }
    if n_units == 0 {
        return Err(Error::invalid("need at least one unit"));
    }
    let times = grid.times();
    let factor = GpFactor::new(kernel, &times)?;
    let rows = (0..n_units)
        .into_par_iter()
        .map(|i| {
            let mut nrng = derived_rng(seeds.noise, &[stage::SIM_NOISE, i as u64]);
            let c = pick(residual_g.weights(), &mut nrng);
            let mut y = simulate_ar1(&residual_g.atoms()[c], times.len(), &mut nrng);
            let mut srng = derived_rng(seeds.signal, &[stage::SIM_SIGNAL, i as u64]);
            let nonnull = srng.random::<f64>() < p_true;
            if nonnull {
                let f = factor.sample_prior(&mut srng);
                y.iter_mut().zip(f).for_each(|(v, s)| *v += s);
            }
            (y, nonnull, c)
        })
        .collect();
    assemble(rows, &times)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub discoveries: usize,
    /// `FP / (FP + TP)`, zero without discoveries.
    pub fdr: f64,
}

pub fn error_report(flags: &[bool], truth: &TruthLabels, threshold: f64) -> Result<ErrorReport> {
    if flags.len() != truth.len() {
        return Err(Error::invalid(format!("{} flags for {} truth labels", flags.len(), truth.len())));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (&f, &t) in flags.iter().zip(&truth.nonnull) {
        match (f, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let discoveries = tp + fp;
    Ok(ErrorReport {
        threshold,
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fneg,
        discoveries,
        fdr: if discoveries == 0 { 0.0 } else { fp as f64 / discoveries as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(nonnull: Vec<bool>) -> TruthLabels {
        let n = nonnull.len();
        TruthLabels { nonnull, component: vec![0; n] }
    }

    #[test]
    fn fdr_examples() {
        let r = error_report(&[false; 5], &truth(vec![true, false, false, true, false]), 0.5).unwrap();
        assert_eq!((r.fdr, r.discoveries), (0.0, 0));
        assert_eq!(r.false_negatives, 2);

        let mut flags = vec![true; 321];
        flags.extend(vec![false; 10]);
        let mut nn = vec![true; 297];
        nn.extend(vec![false; 24]);
        nn.extend(vec![false; 10]);
        let r = error_report(&flags, &truth(nn), 0.5).unwrap();
        assert_eq!((r.true_positives, r.false_positives), (297, 24));
        assert!((r.fdr - 24.0 / 321.0).abs() < 1e-15);
        assert!((r.fdr - 0.0748).abs() < 1e-4);
        assert_eq!(r.true_positives + r.false_positives + r.true_negatives + r.false_negatives, 331);

        let mut nn = vec![true; 24];
        nn.extend([false, false]);
        let r = error_report(&[true; 26], &truth(nn), 0.5).unwrap();
        assert!((r.fdr - 2.0 / 26.0).abs() < 1e-15);
        assert!(error_report(&[true], &truth(vec![true, false]), 0.5).is_err());
    }

    #[test]
    fn single_component_autocorrelation() {
        let sc = MixtureScenario::new(vec![(ArParams::new(0.5, 0.25).unwrap(), 1.0)], 3500, 40, None).unwrap();
        let (panel, t) = generate_mixture_panel(&sc, 3).unwrap();
        assert_eq!(t.nonnull_count(), 0);
        let r: f64 = panel
            .series()
            .iter()
            .map(|s| {
                let y = s.values();
                let m = y.iter().sum::<f64>() / y.len() as f64;
                let num: f64 = y.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
                let den: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
                num / den
            })
            .sum::<f64>()
            / 3500.0;
        // The lag-1 sample autocorrelation with an estimated mean is biased down by about (1 + 4 phi) / T.
        let expected = 0.5 - (1.0 + 4.0 * 0.5) / 40.0;
        assert!((r - expected).abs() < 0.02, "{r} vs {expected}");
        // Averaging lag-1 and lag-0 moments across units before dividing removes that bias.
        let (mut c1, mut c0) = (0.0, 0.0);
        for s in panel.series() {
            let y = s.values();
            c1 += y.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / 39.0;
            c0 += y.iter().map(|v| v * v).sum::<f64>() / 40.0;
        }
        assert!((c1 / c0 - 0.5).abs() < 0.02, "{}", c1 / c0);
    }

    #[test]
    fn equiprobable_grid_components() {
        let sc = MixtureScenario::grid(&[0.2, 0.6, 0.95], &[0.05, 0.25, 0.5], 9000, 2).unwrap();
        let (_, t) = generate_mixture_panel(&sc, 5).unwrap();
        let mut c = [0f64; 9];
        t.component.iter().for_each(|&k| c[k] += 1.0);
        let chi2: f64 = c.iter().map(|o| (o - 1000.0).powi(2) / 1000.0).sum();
        // chi-square(8) 99th percentile
        assert!(chi2 < 20.09, "{chi2}");
    }

    #[test]
    fn stationary_variance_per_component() {
        let comps = vec![(ArParams::new(0.2, 0.05).unwrap(), 0.5), (ArParams::new(0.95, 0.5).unwrap(), 0.5)];
        let sc = MixtureScenario::new(comps.clone(), 8000, 30, None).unwrap();
        let (panel, t) = generate_mixture_panel(&sc, 6).unwrap();
        for (k, (theta, _)) in comps.iter().enumerate() {
            let vals: Vec<f64> = panel
                .series()
                .iter()
                .zip(&t.component)
                .filter(|(_, &c)| c == k)
                .flat_map(|(s, _)| s.values().to_vec())
                .collect();
            let var = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
            let target = stationary_variance(theta);
            assert!(vals.len() >= 100_000);
            assert!((var / target - 1.0).abs() < 0.03, "component {k}: {var} vs {target}");
        }
    }

    #[test]
    fn tiny_innovation_variance_gives_constant_series() {
        let sc = MixtureScenario::new(vec![(ArParams::new(0.5, 1e-12).unwrap(), 1.0)], 20, 30, None).unwrap();
        let (panel, _) = generate_mixture_panel(&sc, 1).unwrap();
        for s in panel.series() {
            assert!(s.values().iter().all(|v| v.abs() < 1e-5));
        }
    }

    #[test]
    fn seeds_reproduce_panels() {
        let sc = MixtureScenario::grid(&[0.5, 0.7], &[0.25, 0.5], 50, 10).unwrap();
        let a = generate_mixture_panel(&sc, 9).unwrap();
        let b = generate_mixture_panel(&sc, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_mixture_panel(&sc, 10).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn prior_study_counts_and_noise_reuse() {
        let g = draw_residual_distribution(10.0 / 5498f64.ln(), &ArPrior::default(), 60, 1).unwrap();
        let grid = TimeGrid::new(1, 41).unwrap();
        let k = GpKernelParams::new(1.25, 13.0).unwrap();
        let n = 5500;
        for (p, seed) in [(0.2, 11u64), (1.0 / 55.0, 12)] {
            let (_, t) = generate_prior_study(p, &g, n, &grid, k, StudySeeds { signal: seed, noise: 3 }).unwrap();
            let mean = p * n as f64;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((t.nonnull_count() as f64 - mean).abs() < 3.0 * sd);
        }
        let (_, t) = generate_prior_study(1e-12, &g, n, &grid, k, StudySeeds { signal: 1, noise: 3 }).unwrap();
        assert_eq!(t.nonnull_count(), 0);

        // Same noise seed: null units are identical across studies.
        let (a, ta) = generate_prior_study(0.2, &g, 200, &grid, k, StudySeeds { signal: 1, noise: 3 }).unwrap();
        let (b, tb) = generate_prior_study(0.2, &g, 200, &grid, k, StudySeeds { signal: 2, noise: 3 }).unwrap();
        for i in 0..200 {
            if !ta.nonnull[i] && !tb.nonnull[i] {
                assert_eq!(a.series()[i].values(), b.series()[i].values());
            }
        }
        assert!(generate_prior_study(0.0, &g, 10, &grid, k, StudySeeds { signal: 1, noise: 1 }).is_err());
    }

    #[test]
    fn scenario_file_round_trip() {
        let text = "# four-component grid\nN = 40\nT = 12\ngrid_phi = 0.2, 0.95\ngrid_v = 0.05, 0.5\nseed = 7\n";
        let (sc, seed) = MixtureScenario::parse(text).unwrap();
        assert_eq!(seed, Some(7));
        assert_eq!(sc.components().len(), 4);
        assert!(sc.components().iter().all(|c| (c.1 - 0.25).abs() < 1e-15));
        let text = "N=5\nT=3\ncomponent = 0.5, 0.25, 2\ncomponent = 0.9, 0.5, 2\np_true = 0.5\ntrajectory = gp\n";
        let (sc, _) = MixtureScenario::parse(text).unwrap();
        assert!(matches!(sc.mean_shift().unwrap().source, TrajectorySource::Gp { .. }));
        assert!(MixtureScenario::parse("N=5\ncomponent=0.5,0.2,1").is_err());
        assert!(MixtureScenario::parse("N=5\nT=2\nbogus=1").is_err());
        assert!(MixtureScenario::parse("N=5\nT=2\ncomponent=1.5,0.2,1").is_err());
    }
}
