//! A common front for the three counterfactual estimators.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::forest::{fit_forest, ForestConfig, ForestModel};
use crate::panel::Panel;
use crate::solvers::{fit_enet, fit_scm, EnetFit, EnetOptions, ScmOptions, ScmWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    Forest,
    Scm,
    Enet,
}

impl std::fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorTag::Forest => "forest",
            EstimatorTag::Scm => "scm",
            EstimatorTag::Enet => "enet",
        })
    }
}

/// Estimator choice with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum EstimatorSpec {
    Forest(ForestConfig),
    Scm(ScmOptions),
    Enet {
        lambda: f64,
        alpha_mix: f64,
        #[serde(default)]
        options: EnetOptions,
    },
}

impl EstimatorSpec {
    pub fn tag(&self) -> EstimatorTag {
        match self {
            EstimatorSpec::Forest(_) => EstimatorTag::Forest,
            EstimatorSpec::Scm(_) => EstimatorTag::Scm,
            EstimatorSpec::Enet { .. } => EstimatorTag::Enet,
        }
    }

    /// Same spec with the forest seed replaced; a no-op for the
    /// deterministic solvers.
    pub fn with_seed(&self, seed: u64) -> Self {
        match self {
            EstimatorSpec::Forest(cfg) => EstimatorSpec::Forest(ForestConfig { seed, ..cfg.clone() }),
            other => other.clone(),
        }
    }

    pub fn fit(&self, panel: &Panel, rows: &[usize]) -> Result<FittedModel> {
        Ok(match self {
            EstimatorSpec::Forest(cfg) => FittedModel::Forest(fit_forest(panel, rows, cfg)?),
            EstimatorSpec::Scm(opts) => FittedModel::Scm(fit_scm(panel, rows, opts)?),
            EstimatorSpec::Enet {
                lambda,
                alpha_mix,
                options,
            } => FittedModel::Enet(fit_enet(panel, rows, *lambda, *alpha_mix, options)?),
        })
    }

    /// Fits on the whole pre-treatment block.
    pub fn fit_pre(&self, panel: &Panel) -> Result<FittedModel> {
        let rows: Vec<usize> = panel.pre_range().collect();
        self.fit(panel, &rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "estimator", rename_all = "snake_case")]
pub enum FittedModel {
    Forest(ForestModel),
    Scm(ScmWeights),
    Enet(EnetFit),
}

impl FittedModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            FittedModel::Forest(m) => m.predict(x),
            FittedModel::Scm(w) => w.predict(x),
            FittedModel::Enet(f) => f.predict(x),
        }
    }

    pub fn training_range(&self) -> Range<usize> {
        match self {
            FittedModel::Forest(m) => m.training_range.clone(),
            FittedModel::Scm(w) => w.training_range.clone(),
            FittedModel::Enet(f) => f.training_range.clone(),
        }
    }

    pub fn tag(&self) -> EstimatorTag {
        match self {
            FittedModel::Forest(_) => EstimatorTag::Forest,
            FittedModel::Scm(_) => EstimatorTag::Scm,
            FittedModel::Enet(_) => EstimatorTag::Enet,
        }
    }

    /// Predictions for every period of the panel.
    pub fn predict_panel(&self, panel: &Panel) -> Vec<f64> {
        use rayon::prelude::*;
        (0..panel.t())
            .into_par_iter()
            .map(|t| self.predict(&panel.x_row(t)))
            .collect()
    }
}
