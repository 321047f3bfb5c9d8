//! Post-processing of chains: MLE trajectory sets, frozen reruns, reports.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdp::{run_chain_with, ChainOutput, FdpConfig, SweepRecord, TrajLabel, Trajectory, TrajectoryAtom};
use crate::panel::{SeriesPanel, TimeGrid};
use crate::parametric::{classify_flags, InclusionSummary};

/// The top-weight trajectory atoms of the best retained sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleTrajectorySet {
    /// Sorted by nonincreasing weight.
    pub atoms: Vec<TrajectoryAtom>,
    /// `flat:<index>` or `gp:<index>` in the source sweep.
    pub names: Vec<String>,
    pub source_sweep: u64,
    pub grid: TimeGrid,
}

impl MleTrajectorySet {
    pub fn k(&self) -> usize {
        self.atoms.len()
    }

    /// Long format: `atom,kind,weight,time,value`.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "atom,kind,weight,time,value")?;
        let times = self.grid.times();
        for (a, name) in self.atoms.iter().zip(&self.names) {
            for (k, t) in times.iter().enumerate() {
                writeln!(w, "{name},{},{},{t},{}", a.trajectory.kind(), a.weight, a.trajectory.at(k))?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R, grid: &TimeGrid) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(r);
        let mut names: Vec<String> = Vec::new();
        let mut atoms: Vec<TrajectoryAtom> = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| Error::Parse(format!("trajectory set: {e}")))?;
            let field = |i: usize| row.get(i).ok_or_else(|| Error::Parse("trajectory set: short row".into()));
            let num = |i: usize| -> Result<f64> {
                field(i)?.parse().map_err(|_| Error::Parse(format!("trajectory set: bad number {:?}", row.get(i))))
            };
            let name = field(0)?.to_string();
            let kind = field(1)?;
            let weight = num(2)?;
            let t: i64 = field(3)?.parse().map_err(|_| Error::Parse("trajectory set: bad time".into()))?;
            let value = num(4)?;
            let k = grid.indices(&[t])?[0];
            if names.last() != Some(&name) {
                names.push(name);
                atoms.push(TrajectoryAtom {
                    trajectory: match kind {
                        "flat" => Trajectory::Flat { level: value },
                        "gp" => Trajectory::Path { values: vec![f64::NAN; grid.len()] },
                        other => return Err(Error::Parse(format!("trajectory set: unknown kind {other:?}"))),
                    },
                    weight,
                });
            }
            if let Trajectory::Path { values } = &mut atoms.last_mut().expect("pushed above").trajectory {
                values[k] = value;
            }
        }
        for (a, n) in atoms.iter().zip(&names) {
            if let Trajectory::Path { values } = &a.trajectory {
                if values.iter().any(|v| v.is_nan()) {
                    return Err(Error::Parse(format!("trajectory set: atom {n} does not cover the grid")));
                }
            }
        }
        Ok(Self { atoms, names, source_sweep: 0, grid: *grid })
    }
}

/// The `k` highest-weight alternative atoms of the retained sweep with the
/// largest complete-data log-likelihood.
pub fn mle_trajectory_set(chain: &ChainOutput, k: usize) -> Result<MleTrajectorySet> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let rec: &SweepRecord = &chain.best;
    let mut all: Vec<(String, TrajectoryAtom)> = rec
        .flat_atoms
        .iter()
        .map(|a| (format!("flat:{}", a.index), a))
        .chain(rec.gp_atoms.iter().map(|a| (format!("gp:{}", a.index), a)))
        .map(|(n, a)| (n, TrajectoryAtom { trajectory: a.trajectory.clone(), weight: a.weight }))
        .collect();
    all.sort_by(|a, b| b.1.weight.total_cmp(&a.1.weight).then_with(|| a.0.cmp(&b.0)));
    if k > all.len() {
        log::warn!("requested {k} trajectories but only {} are stored; using all of them", all.len());
    }
    all.truncate(k);
    let (names, atoms) = all.into_iter().unzip();
    Ok(MleTrajectorySet {
        atoms,
        names,
        source_sweep: rec.sweep,
        grid: chain.grid,
    })
}

/// Posterior membership percentages over frozen atoms, "other" and "null".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipTable {
    pub unit_ids: Vec<String>,
    pub columns: Vec<String>,
    pub percent: Vec<Vec<f64>>,
}

impl MembershipTable {
    pub fn from_counts(unit_ids: Vec<String>, frozen_names: &[String], counts: &[Vec<u32>]) -> Self {
        let mut columns: Vec<String> = frozen_names.to_vec();
        columns.push("other".into());
        columns.push("null".into());
        let percent = counts
            .iter()
            .map(|row| {
                let total: u32 = row.iter().sum();
                row.iter().map(|&c| 100.0 * c as f64 / total.max(1) as f64).collect()
            })
            .collect();
        Self { unit_ids, columns, percent }
    }

    /// Full-precision percentages.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> std::io::Result<()> {
        self.write_with(&mut w, comment, |x| format!("{x}"))
    }

    /// Whole percentages, for reading.
    pub fn write_rounded<W: Write>(&self, mut w: W, comment: Option<&str>) -> std::io::Result<()> {
        self.write_with(&mut w, comment, |x| format!("{:.0}", x))
    }

    fn write_with<W: Write, F: Fn(f64) -> String>(&self, w: &mut W, comment: Option<&str>, fmt: F) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "unit_id,{}", self.columns.join(","))?;
        for (id, row) in self.unit_ids.iter().zip(&self.percent) {
            let cells: Vec<String> = row.iter().map(|&x| fmt(x)).collect();
            writeln!(w, "{id},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Rerun the joint sampler with the MLE atoms and their weights held fixed.
pub fn frozen_cluster_rerun(
    panel: &SeriesPanel,
    frozen: &MleTrajectorySet,
    config: &FdpConfig,
    n_burn: usize,
    n_keep: usize,
    seed: u64,
) -> Result<(MembershipTable, ChainOutput)> {
    let grid = panel.grid()?;
    if grid != frozen.grid {
        return Err(Error::invalid(format!(
            "frozen trajectories live on grid {}..+{} but the panel spans {}..+{}",
            frozen.grid.start(),
            frozen.grid.len(),
            grid.start(),
            grid.len()
        )));
    }
    let chain = run_chain_with(panel, config, n_burn, n_keep, seed, Some(frozen.atoms.clone()))?;
    let counts = chain.frozen_membership.as_ref().expect("frozen run records membership");
    let table = MembershipTable::from_counts(chain.unit_ids.clone(), &frozen.names, counts);
    Ok((table, chain))
}

pub fn inclusion_summary(chain: &ChainOutput) -> Result<InclusionSummary> {
    InclusionSummary::new(chain.unit_ids.clone(), chain.inclusion.clone(), chain.inclusion_stderr.clone())
}

/// `"<count> of <n> units flagged at p_i >= <threshold>"`.
pub fn discovery_line(p: &[f64], threshold: f64) -> String {
    let c = classify_flags(p, threshold).iter().filter(|&&f| f).count();
    format!("{c} of {} units flagged at p_i >= {threshold}", p.len())
}

/// Inclusion table with one flag column per threshold (`flag50` for 0.5).
pub fn write_inclusion_table<W: Write>(
    ids: &[String],
    p: &[f64],
    stderr: &[f64],
    thresholds: &[f64],
    mut w: W,
    comment: Option<&str>,
) -> std::io::Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let names: Vec<String> = thresholds.iter().map(|t| format!("flag{}", threshold_tag(*t))).collect();
    writeln!(w, "unit_id,p_i,mc_stderr,{}", names.join(","))?;
    let flags: Vec<Vec<bool>> = thresholds.iter().map(|&t| classify_flags(p, t)).collect();
    for i in 0..ids.len() {
        let f: Vec<&str> = flags.iter().map(|col| if col[i] { "1" } else { "0" }).collect();
        writeln!(w, "{},{},{},{}", ids[i], p[i], stderr[i], f.join(","))?;
    }
    Ok(())
}

fn threshold_tag(t: f64) -> String {
    let pct = t * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct}")
    }
}

/// Per-unit 5/50/95% posterior bands of the mean trajectory on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBands {
    pub unit_ids: Vec<String>,
    pub times: Vec<i64>,
    /// `[unit][time] -> (q05, q50, q95)`
    pub bands: Vec<Vec<[f64; 3]>>,
}

impl TrajectoryBands {
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "unit_id,time,q05,q50,q95")?;
        for (id, rows) in self.unit_ids.iter().zip(&self.bands) {
            for (t, b) in self.times.iter().zip(rows) {
                writeln!(w, "{id},{t},{},{},{}", b[0], b[1], b[2])?;
            }
        }
        Ok(())
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    let h = (xs.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    xs[lo] + (h - lo as f64) * (xs[hi] - xs[lo])
}

/// Bands from the stored checkpoints.
pub fn trajectory_bands(chain: &ChainOutput) -> Result<TrajectoryBands> {
    if chain.sweeps.is_empty() {
        return Err(Error::invalid("chain has no checkpoints"));
    }
    let g = chain.grid.len();
    let frozen = chain.frozen.as_deref();
    let mut bands = Vec::with_capacity(chain.n_units());
    let mut buf = vec![0.0; chain.sweeps.len()];
    for i in 0..chain.n_units() {
        let mut rows = Vec::with_capacity(g);
        for k in 0..g {
            for (r, rec) in chain.sweeps.iter().enumerate() {
                let label: TrajLabel = rec.labels[i];
                buf[r] = rec.value(label, k, frozen).ok_or_else(|| {
                    Error::invalid(format!("checkpoint at sweep {} lacks trajectory {label:?}", rec.sweep))
                })?;
            }
            buf.sort_by(f64::total_cmp);
            rows.push([quantile_sorted(&buf, 0.05), quantile_sorted(&buf, 0.5), quantile_sorted(&buf, 0.95)]);
        }
        bands.push(rows);
    }
    Ok(TrajectoryBands {
        unit_ids: chain.unit_ids.clone(),
        times: chain.grid.times(),
        bands,
    })
}

/// Write `inclusion.csv`, `bands.csv` and `summary.txt` into `dir`.
pub fn report_summaries(chain: &ChainOutput, thresholds: &[f64], dir: &Path, header: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let create = |name: &str| -> Result<(PathBuf, std::io::BufWriter<std::fs::File>)> {
        let p = dir.join(name);
        let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        Ok((p, std::io::BufWriter::new(f)))
    };

    let (p, mut w) = create("inclusion.csv")?;
    write_inclusion_table(&chain.unit_ids, &chain.inclusion, &chain.inclusion_stderr, thresholds, &mut w, Some(header))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&p, e))?;
    written.push(p);

    let bands = trajectory_bands(chain)?;
    let (p, mut w) = create("bands.csv")?;
    bands.write_csv(&mut w, Some(header)).and_then(|_| w.flush()).map_err(|e| Error::io(&p, e))?;
    written.push(p);

    let (p, mut w) = create("summary.txt")?;
    let mut text = format!("# {header}\n");
    for &t in thresholds {
        text.push_str(&discovery_line(&chain.inclusion, t));
        text.push('\n');
    }
    let n = chain.component_trace.len() as f64;
    let mean: Vec<f64> = (0..3).map(|k| chain.component_trace.iter().map(|c| c[k]).sum::<f64>() / n).collect();
    text.push_str(&format!(
        "posterior mean component probabilities: null {} flat {} gp {}\n",
        mean[0], mean[1], mean[2]
    ));
    text.push_str(&format!(
        "best complete-data log-likelihood {} at sweep {}\n",
        chain.best.complete_loglik, chain.best.sweep
    ));
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(&p, e))?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdp::{default_hyperparameters, run_chain};
    use crate::panel::ObservedSeries;
    use crate::rng::rng_from;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn panel(n: usize, t: usize, seed: u64) -> SeriesPanel {
        let mut rng = rng_from(seed);
        let s = (0..n)
            .map(|i| {
                let shift = if i % 3 == 0 { 2.0 } else { 0.0 };
                let v: Vec<f64> = (0..t).map(|_| shift + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
                ObservedSeries::contiguous(format!("u{i}"), v).unwrap()
            })
            .collect();
        SeriesPanel::new(s, 1).unwrap()
    }

    #[test]
    fn mle_set_is_sorted_and_clamped() {
        let p = panel(15, 10, 1);
        let cfg = default_hyperparameters(15).unwrap();
        let chain = run_chain(&p, &cfg, 20, 20, 2).unwrap();
        let set = mle_trajectory_set(&chain, 17).unwrap();
        assert_eq!(set.k(), 17);
        assert!(set.atoms.windows(2).all(|w| w[0].weight >= w[1].weight));
        assert_eq!(set.source_sweep, chain.best.sweep);
        let all = mle_trajectory_set(&chain, 10_000).unwrap();
        assert_eq!(all.k(), chain.best.flat_atoms.len() + chain.best.gp_atoms.len());
        assert!(mle_trajectory_set(&chain, 0).is_err());

        let one = run_chain(&p, &cfg, 1, 1, 3).unwrap();
        let top = mle_trajectory_set(&one, 1).unwrap();
        let max = one.best.flat_atoms.iter().chain(&one.best.gp_atoms).map(|a| a.weight).fold(0.0, f64::max);
        assert_eq!(top.atoms[0].weight, max);
    }

    #[test]
    fn trajectory_set_csv_round_trip() {
        let p = panel(9, 6, 4);
        let cfg = default_hyperparameters(9).unwrap();
        let chain = run_chain(&p, &cfg, 5, 5, 5).unwrap();
        let set = mle_trajectory_set(&chain, 5).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf, Some("test")).unwrap();
        let back = MleTrajectorySet::read_csv(&buf[..], &set.grid).unwrap();
        assert_eq!(back.atoms, set.atoms);
        assert_eq!(back.names, set.names);
    }

    #[test]
    fn frozen_rerun_rows_sum_to_100_and_atoms_untouched() {
        let p = panel(12, 8, 6);
        let cfg = default_hyperparameters(12).unwrap();
        let chain = run_chain(&p, &cfg, 20, 20, 7).unwrap();
        let set = mle_trajectory_set(&chain, 4).unwrap();
        let before = crate::config::fingerprint_of(&set.atoms);
        let (table, rerun) = frozen_cluster_rerun(&p, &set, &cfg, 10, 30, 8).unwrap();
        assert_eq!(crate::config::fingerprint_of(rerun.frozen.as_ref().unwrap()), before);
        assert_eq!(crate::config::fingerprint_of(&set.atoms), before);
        assert_eq!(table.columns.len(), 6);
        for row in &table.percent {
            assert!((row.iter().sum::<f64>() - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn flags_and_discovery_line() {
        let ids: Vec<String> = (0..3).map(|i| format!("u{i}")).collect();
        let mut buf = Vec::new();
        write_inclusion_table(&ids, &[0.2, 0.5, 0.95], &[0.0; 3], &[0.5, 0.9], &mut buf, None).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("unit_id,p_i,mc_stderr,flag50,flag90\n"));
        assert!(s.contains("u1,0.5,0,1,0\n"));
        assert!(s.contains("u2,0.95,0,1,1\n"));
        assert_eq!(discovery_line(&[0.2, 0.5, 0.95], 0.5), "2 of 3 units flagged at p_i >= 0.5");
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&xs, 0.5), 2.0);
        assert!((quantile_sorted(&xs, 0.05) - 0.2).abs() < 1e-15);
        assert_eq!(quantile_sorted(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn bands_cover_null_units() {
        let p = panel(12, 10, 9);
        let cfg = default_hyperparameters(12).unwrap();
        let chain = run_chain(&p, &cfg, 100, 300, 10).unwrap();
        let b = trajectory_bands(&chain).unwrap();
        assert_eq!(b.bands.len(), 12);
        for row in &b.bands {
            for q in row {
                assert!(q[0] <= q[1] && q[1] <= q[2]);
            }
        }
        // Units with a shift of 2 should have bands away from zero somewhere.
        let shifted = &b.bands[0];
        assert!(shifted.iter().any(|q| q[0] > 0.0));
    }
}
