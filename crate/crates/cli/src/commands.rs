use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dpar_core::analysis::{
    discovery_line, frozen_cluster_rerun, mle_trajectory_set, report_summaries, write_inclusion_table,
};
use dpar_core::fdp::{run_chains, ChainOutput};
use dpar_core::parametric::{build_importance_sampler, inclusion_probabilities_parametric, posterior_p_mode};
use dpar_core::simulation::{generate_mixture_panel, MixtureScenario};
use dpar_core::{cdf_standardize, Error, SeriesPanel};
use serde::{Deserialize, Serialize};

use crate::settings::{self, CliError, CliResult, Run};
use crate::{ClusterArgs, Common};

/// A chain as persisted by `fit-np`, tagged with the run that produced it.
#[derive(Serialize, Deserialize)]
struct ChainFile {
    command: String,
    seed: u64,
    fingerprint: String,
    chain: ChainOutput,
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str, cmd: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::Usage(format!("{cmd} needs --{flag}")))
}

fn write_file<F>(dir: &Path, name: &str, body: F) -> CliResult<PathBuf>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn read_panel(args: &Common, cmd: &str, min_length: usize) -> CliResult<(SeriesPanel, String)> {
    let input = required(&args.input, "input", cmd)?;
    let panel = SeriesPanel::read_csv_path(input, min_length)?;
    if panel.is_empty() {
        return Err(Error::invalid(format!("{} holds no admissible series", input.display())).into());
    }
    Ok((panel, settings::file_digest(input)?))
}

fn read_chain(path: &Path) -> CliResult<ChainFile> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(f))
        .map_err(|e| Error::Parse(format!("{}: not a chain file: {e}", path.display())).into())
}

pub fn standardize(args: &Common) -> CliResult<Vec<PathBuf>> {
    let cfg = settings::load(args.config.as_deref(), settings::PANEL_KEYS)?;
    let (panel, digest) = read_panel(args, "standardize", settings::min_length(&cfg)?)?;
    let mut run = Run::new("standardize", args.seed.unwrap_or(0), &cfg);
    run.set("input_sha256", digest);
    let out = cdf_standardize(&panel)?;
    let header = run.header();
    let p = write_file(&args.output_dir, "standardized.csv", |w| out.write_csv(w, Some(&header)))?;
    Ok(vec![p])
}

pub fn fit_parametric(args: &Common) -> CliResult<Vec<PathBuf>> {
    let cfg = settings::load(args.config.as_deref(), settings::PARAMETRIC_KEYS)?;
    let (panel, digest) = read_panel(args, "fit-parametric", settings::min_length(&cfg)?)?;
    let (prior, n_draws) = settings::parametric(&cfg)?;
    let thresholds = settings::thresholds(&args.threshold)?;
    let seed = args.seed.unwrap_or(0);
    let mut run = Run::new("fit-parametric", seed, &cfg);
    run.set("input_sha256", digest);
    run.set("thresholds", format!("{thresholds:?}"));
    let header = run.header();

    let draws = build_importance_sampler(&prior, &panel, n_draws, seed)?;
    let summary = inclusion_probabilities_parametric(&draws, &panel, &prior)?;
    let p_mode = posterior_p_mode(&draws)?;

    let mut files = Vec::new();
    files.push(write_file(&args.output_dir, "inclusion.csv", |w| {
        write_inclusion_table(&summary.unit_ids, &summary.p, &summary.mc_stderr, &thresholds, w, Some(&header))
    })?);
    let mut text = format!("# {header}\n");
    text.push_str(&format!("posterior mode of p: {p_mode}\n"));
    if let Some(m) = &draws.mode {
        text.push_str(&format!("joint posterior mode: phi {} v {} p {}\n", m.phi, m.v, m.p));
    }
    text.push_str(&format!(
        "importance draws: {} effective sample size: {}\n",
        draws.len(),
        draws.effective_sample_size
    ));
    if let Some(w) = &draws.warning {
        text.push_str(&format!("warning: {w}\n"));
    }
    for &t in &thresholds {
        text.push_str(&discovery_line(&summary.p, t));
        text.push('\n');
    }
    files.push(write_file(&args.output_dir, "summary.txt", |w| w.write_all(text.as_bytes()))?);
    Ok(files)
}

pub fn fit_np(args: &Common) -> CliResult<Vec<PathBuf>> {
    let cfg = settings::load(args.config.as_deref(), settings::NP_KEYS)?;
    let (panel, digest) = read_panel(args, "fit-np", settings::min_length(&cfg)?)?;
    let fdp = settings::fdp(&cfg, panel.len())?;
    let thresholds = settings::thresholds(&args.threshold)?;
    if args.chains == 0 {
        return Err(CliError::Usage("--chains must be at least 1".into()));
    }
    let seed = args.seed.unwrap_or(0);
    let mut run = Run::new("fit-np", seed, &cfg);
    run.set("input_sha256", digest);
    run.set("burn", args.burn);
    run.set("keep", args.keep);
    run.set("chains", args.chains);
    run.set("thresholds", format!("{thresholds:?}"));
    let header = run.header();

    let chains = run_chains(&panel, &fdp, args.burn, args.keep, seed, args.chains)?;
    let mut files = Vec::new();
    for (c, chain) in chains.iter().enumerate() {
        files.push(write_file(&args.output_dir, &format!("checkpoints{c}.jsonl"), |w| {
            writeln!(w, "{{\"dpar\":\"fit-np\",\"seed\":{seed},\"fingerprint\":\"{}\"}}", run.fingerprint())?;
            chain.write_checkpoints(&mut *w).map_err(std::io::Error::other)
        })?);
    }
    let n = panel.len();
    let cn = chains.len() as f64;
    let p: Vec<f64> = (0..n).map(|i| chains.iter().map(|c| c.inclusion[i]).sum::<f64>() / cn).collect();
    let se: Vec<f64> = (0..n)
        .map(|i| chains.iter().map(|c| c.inclusion_stderr[i].powi(2)).sum::<f64>().sqrt() / cn)
        .collect();
    let ids = &chains[0].unit_ids;
    files.push(write_file(&args.output_dir, "inclusion.csv", |w| {
        write_inclusion_table(ids, &p, &se, &thresholds, w, Some(&header))
    })?);

    let mut text = format!("# {header}\n");
    for &t in &thresholds {
        text.push_str(&discovery_line(&p, t));
        text.push('\n');
    }
    for (c, chain) in chains.iter().enumerate() {
        let m = chain.component_trace.len() as f64;
        let mean: Vec<f64> = (0..3).map(|k| chain.component_trace.iter().map(|x| x[k]).sum::<f64>() / m).collect();
        text.push_str(&format!(
            "chain {c}: seed {} mean component probabilities null {} flat {} gp {}\n",
            chain.seed, mean[0], mean[1], mean[2]
        ));
    }
    if chains.len() > 1 {
        let spread = (0..n)
            .map(|i| {
                let (lo, hi) = chains
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c.inclusion[i]), hi.max(c.inclusion[i])));
                hi - lo
            })
            .fold(0.0, f64::max);
        text.push_str(&format!("largest between-chain spread of p_i: {spread}\n"));
    }
    files.push(write_file(&args.output_dir, "summary.txt", |w| w.write_all(text.as_bytes()))?);

    for (c, chain) in chains.into_iter().enumerate() {
        let file = ChainFile {
            command: "fit-np".into(),
            seed,
            fingerprint: run.fingerprint(),
            chain,
        };
        files.push(write_file(&args.output_dir, &format!("chain{c}.json"), |w| {
            serde_json::to_writer(&mut *w, &file).map_err(std::io::Error::other)?;
            writeln!(w)
        })?);
    }
    Ok(files)
}

pub fn simulate(args: &Common) -> CliResult<Vec<PathBuf>> {
    let path = required(&args.scenario, "scenario", "simulate")?;
    let (scenario, file_seed) = MixtureScenario::from_path(path)?;
    let seed = args
        .seed
        .or(file_seed)
        .ok_or_else(|| CliError::Usage("simulate needs --seed or a seed in the scenario file".into()))?;
    let mut run = Run::new("simulate", seed, &dpar_core::RunConfig::new());
    run.set("scenario_sha256", settings::file_digest(path)?);
    let header = run.header();
    let (panel, truth) = generate_mixture_panel(&scenario, seed)?;
    Ok(vec![
        write_file(&args.output_dir, "panel.csv", |w| panel.write_csv(w, Some(&header)))?,
        write_file(&args.output_dir, "truth.csv", |w| truth.write_csv(&panel, w, Some(&header)))?,
    ])
}

pub fn report(args: &Common) -> CliResult<Vec<PathBuf>> {
    let input = required(&args.input, "input", "report")?;
    let thresholds = settings::thresholds(&args.threshold)?;
    let file = read_chain(input)?;
    let mut run = Run::new("report", file.seed, &dpar_core::RunConfig::new());
    run.set("input_sha256", settings::file_digest(input)?);
    run.set("source_fingerprint", &file.fingerprint);
    run.set("thresholds", format!("{thresholds:?}"));
    Ok(report_summaries(&file.chain, &thresholds, &args.output_dir, &run.header())?)
}

pub fn cluster_mle(args: &ClusterArgs) -> CliResult<Vec<PathBuf>> {
    let common = &args.common;
    let cfg = settings::load(common.config.as_deref(), settings::NP_KEYS)?;
    let (panel, digest) = read_panel(common, "cluster-mle", settings::min_length(&cfg)?)?;
    let fdp = settings::fdp(&cfg, panel.len())?;
    let file = read_chain(&args.chain)?;
    if file.chain.unit_ids.len() != panel.len() {
        return Err(Error::invalid(format!(
            "chain covers {} units but the panel has {}",
            file.chain.unit_ids.len(),
            panel.len()
        ))
        .into());
    }
    let seed = common.seed.unwrap_or(0);
    let mut run = Run::new("cluster-mle", seed, &cfg);
    run.set("input_sha256", digest);
    run.set("chain_sha256", settings::file_digest(&args.chain)?);
    run.set("k", args.k);
    run.set("burn", common.burn);
    run.set("keep", common.keep);
    let header = run.header();

    let set = mle_trajectory_set(&file.chain, args.k)?;
    let (table, _) = frozen_cluster_rerun(&panel, &set, &fdp, common.burn, common.keep, seed)?;
    Ok(vec![
        write_file(&common.output_dir, "mle_trajectories.csv", |w| set.write_csv(w, Some(&header)))?,
        write_file(&common.output_dir, "membership.csv", |w| table.write_csv(w, Some(&header)))?,
        write_file(&common.output_dir, "membership_rounded.csv", |w| table.write_rounded(w, Some(&header)))?,
    ])
}
