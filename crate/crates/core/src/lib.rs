//! Bayesian multiple testing for panels of autoregressive time series.
//!
//! Units are tested against a stationary AR(1) null. Three models are
//! provided:
//!
//! * [`parametric`]: a single `(phi, v)` null with a constant mean shift
//!   alternative, fitted by importance sampling over `(phi, v, p)`;
//! * [`dp`]: a truncated stick-breaking Dirichlet-process mixture of AR(1)
//!   laws for the residuals;
//! * [`fdp`]: a three-way mixture of the zero trajectory, a DP of flat
//!   trajectories and a functional DP of Gaussian-process paths, convolved
//!   with the DP residual model and fitted by blocked Gibbs sampling.
//!
//! [`simulation`] generates panels with known truth and scores flags
//! against it; [`analysis`] holds the post-processing used by the CLI.

pub mod analysis;
pub mod antoniak;
pub mod ar;
pub mod config;
pub mod dense;
pub mod diagnostics;
pub mod dp;
pub mod error;
pub mod fdp;
pub mod gp;
pub mod normal;
pub mod panel;
pub mod parametric;
pub mod priors;
pub mod rng;
pub mod simulation;
pub mod standardize;
pub mod sticks;

pub use ar::{
    ar1_loglik, build_ar1_covariance, conditional_bayes_factor, mean_shift_loglik,
    stationary_variance, Ar1Covariance, ArParams, MeanShiftScale,
};
pub use error::{Error, Result};
pub use panel::{ObservedSeries, SeriesPanel, SeriesView, TimeGrid};
pub use priors::{ArPrior, ParametricPrior};
pub use standardize::cdf_standardize;
pub use analysis::{frozen_cluster_rerun, mle_trajectory_set, MembershipTable, MleTrajectorySet};
pub use config::RunConfig;
pub use dp::ResidualOptions;
pub use fdp::{default_hyperparameters, run_chain, run_chains, ChainOutput, FdpConfig, TrajectoryAtom};
pub use gp::GpKernelParams;
pub use parametric::{build_importance_sampler, inclusion_probabilities_parametric, InclusionSummary, WeightedDraws};
pub use simulation::MixtureScenario;
