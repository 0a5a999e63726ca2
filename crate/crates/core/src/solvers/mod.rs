//! Linear comparator estimators: simplex-constrained synthetic-control
//! weights and elastic-net weights with an intercept.

mod enet;
mod scm;

pub use enet::{
    default_enet_grid, fit_enet, fit_enet_on, kkt_residuals, soft_threshold, tune_enet, EnetFit, EnetOptions,
    EnetTuning,
};
pub use scm::{fit_scm, fit_scm_on, project_to_simplex, ScmOptions, ScmWeights};

use crate::error::{invalid, Result};
use crate::panel::Panel;

/// Rows of `panel` as (controls, treated) slices, with range checks.
pub(crate) fn gather(panel: &Panel, rows: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if rows.is_empty() {
        return Err(invalid("no training rows"));
    }
    if let Some(&bad) = rows.iter().find(|&&t| t >= panel.t()) {
        return Err(invalid(format!("row {bad} outside panel of length {}", panel.t())));
    }
    let x = rows.iter().map(|&t| panel.x_row(t)).collect();
    let y = rows.iter().map(|&t| panel.treated()[t]).collect();
    Ok((x, y))
}

pub(crate) fn span(rows: &[usize]) -> std::ops::Range<usize> {
    let lo = rows.iter().copied().min().unwrap_or(0);
    let hi = rows.iter().copied().max().map_or(0, |m| m + 1);
    lo..hi
}
