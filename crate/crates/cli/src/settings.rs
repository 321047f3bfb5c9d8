//! Run settings: config file keys, defaults, and the run fingerprint.

use std::fmt;
use std::path::Path;

use dpar_core::fdp::{default_hyperparameters, FdpConfig};
use dpar_core::gp::GpKernelParams;
use dpar_core::parametric::DEFAULT_DRAWS;
use dpar_core::priors::{ArPrior, ParametricPrior};
use dpar_core::{Error, RunConfig};
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const PARAMETRIC_KEYS: &[&str] = &["min_length", "d", "D", "a", "b", "sigma2", "draws"];
pub const NP_KEYS: &[&str] = &[
    "min_length",
    "d",
    "D",
    "a",
    "b",
    "kappa1",
    "kappa2",
    "alpha",
    "nu",
    "residual_truncation",
    "gp_truncation",
    "flat_truncation",
    "mh_steps",
    "checkpoint_stride",
];
pub const PANEL_KEYS: &[&str] = &["min_length"];

/// Load `--config` and reject keys the command does not understand.
pub fn load(path: Option<&Path>, allowed: &[&str]) -> CliResult<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::new(),
    };
    if let Some(k) = cfg.keys().find(|k| !allowed.contains(k)) {
        return Err(Error::Parse(format!("unknown setting {k:?}; expected one of {}", allowed.join(", "))).into());
    }
    Ok(cfg)
}

pub fn min_length(cfg: &RunConfig) -> CliResult<usize> {
    Ok(cfg.value_or("min_length", 1usize)?)
}

fn ar_prior(cfg: &RunConfig) -> CliResult<ArPrior> {
    let d = ArPrior::default();
    Ok(ArPrior::new(
        cfg.value_or("d", d.d)?,
        cfg.value_or("D", d.phi_var)?,
        cfg.value_or("a", d.a)?,
        cfg.value_or("b", d.b)?,
    )?)
}

pub fn parametric(cfg: &RunConfig) -> CliResult<(ParametricPrior, usize)> {
    let prior = ParametricPrior {
        ar: ar_prior(cfg)?,
        sigma2: cfg.value_or("sigma2", ParametricPrior::default().sigma2)?,
    };
    prior.validate()?;
    Ok((prior, cfg.value_or("draws", DEFAULT_DRAWS)?))
}

pub fn fdp(cfg: &RunConfig, n_units: usize) -> CliResult<FdpConfig> {
    let mut c = default_hyperparameters(n_units)?;
    c.base = ar_prior(cfg)?;
    c.kernel = GpKernelParams::new(
        cfg.value_or("kappa1", c.kernel.kappa1())?,
        cfg.value_or("kappa2", c.kernel.kappa2())?,
    )?;
    c.alpha = cfg.value_or("alpha", c.alpha)?;
    c.nu = cfg.value_or("nu", c.nu)?;
    c.residual_truncation = cfg.value_or("residual_truncation", c.residual_truncation)?;
    c.gp_truncation = cfg.value_or("gp_truncation", c.gp_truncation)?;
    c.flat_truncation = cfg.value_or("flat_truncation", c.flat_truncation)?;
    c.residual.mh_steps = cfg.value_or("mh_steps", c.residual.mh_steps)?;
    c.checkpoint_stride = cfg.value_or("checkpoint_stride", c.checkpoint_stride)?;
    c.validate()?;
    Ok(c)
}

pub fn thresholds(given: &[f64]) -> CliResult<Vec<f64>> {
    let t = if given.is_empty() { vec![0.5, 0.9] } else { given.to_vec() };
    if let Some(bad) = t.iter().find(|x| !(**x > 0.0 && **x <= 1.0)) {
        return Err(CliError::Usage(format!("--threshold must lie in (0, 1], got {bad}")));
    }
    Ok(t)
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Every setting of a run, folded into one fingerprint.
pub struct Run {
    pub command: &'static str,
    pub seed: u64,
    pub settings: RunConfig,
}

impl Run {
    pub fn new(command: &'static str, seed: u64, config: &RunConfig) -> Self {
        let mut settings = config.clone();
        settings.set("command", command);
        settings.set("seed", seed);
        Self { command, seed, settings }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.settings.set(key, value);
    }

    pub fn fingerprint(&self) -> String {
        self.settings.fingerprint()
    }

    /// The first line of every output file, without the comment marker.
    pub fn header(&self) -> String {
        format!("dpar {} seed={} fingerprint={}", self.command, self.seed, self.fingerprint())
    }
}
