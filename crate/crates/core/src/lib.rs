//! Tree-based synthetic control.
//!
//! The untreated outcome of a single treated unit is imputed from the
//! outcomes of untreated control units with a constrained regression forest
//! fit on the pre-treatment periods. The gap between observed and imputed
//! outcomes after the onset estimates the treatment effect; block bootstrap,
//! placebo studies and conformal permutation tests quantify its uncertainty.
//! Classic synthetic-control and elastic-net weights are included as
//! comparators.

pub mod effects;
pub mod error;
pub mod estimator;
pub mod forest;
pub mod inference;
pub mod panel;
pub mod rng;
pub mod sim;
pub mod solvers;
pub mod stats;

pub use effects::{
    ate_hat, ate_naive, block_bootstrap_ci, counterfactual, fit_metrics, fit_metrics_on, BootstrapCi,
    CounterfactualFit, EffectReport, FitMetrics,
};
pub use error::{Error, Result};
pub use estimator::{EstimatorSpec, EstimatorTag, FittedModel};
pub use forest::{fit_forest, Bagging, ForestConfig, ForestModel};
pub use panel::{Panel, SplitSpec};
