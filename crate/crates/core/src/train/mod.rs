//! Hyperparameter estimation by maximizing the marginal likelihood.

mod fit;
mod objective;
mod optimize;
mod schema;

pub use fit::{
    fit_patient, fit_series, initial_model, BlockFit, FitConfig, FitResult, RestartReport,
    MIN_OBSERVATIONS_FOR_PERIODIC,
};
pub(crate) use fit::{best_of_restarts, block_seed, median_gap, mix_seed, scale_of};
pub use objective::{
    central_difference, nll, nll_and_gradient, penalized_nll_and_gradient, GaussianPrior, Priors,
};
pub use optimize::{minimize, Minimum, OptimizationTrace, OptimizerSettings};
pub use schema::{ParamEntry, ParamKind, ParamVector, Schema, Transform};
