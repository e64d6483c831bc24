//! Soft predictive-state estimation by nonparametric EM.
//!
//! Each iteration computes posterior state weights from the present-value
//! KDEs, the past-cone Gaussians and the state priors (E-step), refits those
//! models from the new weights (M-step) and scores past-cone-only forecasts
//! on held-out cones. When the weights stop moving, the two states with the
//! closest present-value densities are merged; this repeats down to a single
//! state, and the weights with the lowest held-out MSE are kept.

mod artifact;
mod em;
mod ensemble;
mod kmeans;
mod trace;
mod weights;

pub use artifact::{ModelArtifact, FORMAT_VERSION};
pub use em::{
    approx_loglik, e_step, fit, fit_hard_baseline, merge_closest, predict_mse,
    predict_mse_flc_conditioned, EStep, FitConfig, FitMode, SelectionWeights,
};
pub use ensemble::{build_ensemble, dead_states, StateComponent, StateEnsemble, MASS_FLOOR};
pub use kmeans::{init_weights, InitMode};
pub use trace::{FitTrace, IterationRecord, MergeRecord, RunSummary, Selection};
pub use weights::{check_converged, WeightMatrix, STOCHASTIC_TOL};

pub(crate) use weights::argmax as argmax_index;
