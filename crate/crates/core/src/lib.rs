//! Bayesian inference of chemical reaction network structure and rate constants.
//!
//! The library is organized around five layers:
//!
//! - [`network`]: the reaction-network data model, activation/influence
//!   analysis, effective-network computation, and cluster enumeration.
//! - [`kinetics`]: the deterministic ODE forward model (mass-action and
//!   Michaelis-Menten rate laws) with a stiff adaptive implicit integrator.
//! - [`bayes`]: prior, likelihood, and unnormalized posterior evaluation,
//!   plus the conditional mode / Laplace machinery that centers
//!   between-model proposals.
//! - [`sampler`]: reversible-jump MCMC over models and rate constants in
//!   four variants (network-unaware, network-aware, and their
//!   sensitivity-based counterparts).
//! - [`postprocess`]: posterior summaries from traces, including
//!   cluster-derandomized estimators, effective sample sizes, and
//!   acceptance-rate reports.

pub mod bayes;
pub mod kinetics;
pub mod network;
pub mod postprocess;
pub mod sampler;
