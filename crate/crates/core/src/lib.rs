//! Bayesian synthetic control with multi-output Gaussian processes.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernels`]: base covariance functions and their sum/product closure.
//! - [`mogp`]: coregionalization matrices and block covariance assembly for
//!   heterotopic panels, plus the model variant constructors.
//! - [`gp`]: exact inference (log marginal likelihood, gradient, predictive).
//! - [`optimizer`]: bound-constrained L-BFGS and type-II maximum likelihood.
//! - [`hmc`]: Hamiltonian Monte Carlo over coregionalization loadings.
//! - [`causal`]: pointwise, cumulative, average and multiplicative effects.
//! - [`model`]: per-fit training data (standardization, windows).
//! - [`evaluation`]: scoring rules, DTW screening and combination search.
//! - [`dataset`]: CSV ingestion, time alignment and input transforms.
//! - [`synthetic`]: simulated panels with a known effect.

pub mod causal;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gp;
pub mod hmc;
pub mod kernels;
pub mod model;
pub mod mogp;
pub mod optimizer;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
