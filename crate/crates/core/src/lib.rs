//! Causal latent-force Gaussian processes for intervention-response time series.
//!
//! Each patient covariate is modeled as a stationary baseline GP (squared
//! exponential plus periodic) added to the output of a first-order linear ODE
//! driven by latent forces, one per treatment administration. Each force is a
//! GP with a causal kernel anchored at its administration time, so the
//! induced output covariances and force/output cross-covariances have closed
//! forms in terms of the error function.
//!
//! Module map:
//!
//! - [`kernel`]: base covariance functions and Gram matrices.
//! - [`lfm`]: closed-form latent-force covariances and their quadrature oracles.
//! - [`gp`]: joint model assembly, marginal likelihood and posteriors.
//! - [`train`]: hyperparameter schema, gradients, L-BFGS and per-patient fitting.
//! - [`data`]: patient records, CSV/JSON IO, normalization, splitting and cohort filters.
//! - [`sim`]: synthetic patient generator.
//! - [`baselines`]: SE+Per and OU+Exp comparison models.
//! - [`eval`]: MAE, experiment runner, oracle and gradient checks.

pub mod baselines;
pub mod config;
pub mod data;
mod dual;
pub mod error;
pub mod eval;
pub mod gp;
pub mod kernel;
pub mod lfm;
pub mod sim;
pub mod special;
pub mod train;

pub use error::{Error, Result};
pub use gp::{CovariateModel, GpModel, Posterior, Series, Treatment};
pub use kernel::{ForceConvention, KernelSpec};
pub use lfm::LfmParams;
pub use data::{PatientRecord, Route, TreatmentEvent};
