//! Estimation and bootstrap inference for binary-choice panel data models
//! with interactive fixed effects.
//!
//! The crate provides:
//! - a balanced-panel data model with CSV ingestion ([`panel`]);
//! - logit/probit likelihoods with analytic derivatives ([`likelihood`]);
//! - a two-step estimator: nuclear-norm penalized convex stage plus joint
//!   gradient refinement, with eigenvalue-ratio factor selection
//!   ([`estimator`]);
//! - analytical and split-panel jackknife bias corrections ([`bias`]);
//! - a deterministic parallel parametric bootstrap with plain and
//!   transformation-based confidence intervals ([`bootstrap`]);
//! - average partial effects ([`ape`]);
//! - a Monte Carlo laboratory reproducing the reference simulation designs
//!   ([`sim`]).

pub mod ape;
pub mod bias;
pub mod bootstrap;
pub mod error;
pub mod estimator;
pub mod likelihood;
pub mod panel;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use estimator::{fit, FitOptions, FitResult};
pub use likelihood::{FactorParams, Family};
pub use panel::PanelData;
