use std::ops::Range;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::ForestModel;
use crate::error::{invalid, Result};
use crate::panel::Panel;
use crate::rng;
use crate::stats;

/// Permutation importance of each control over `rows`: the mean increase in
/// RMSPE when that control's values are shuffled among the rows, relative to
/// the unshuffled baseline. Control `i` uses stream `i` of `seed`.
pub fn permutation_importance(
    model: &ForestModel,
    panel: &Panel,
    rows: Range<usize>,
    n_repeats: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_repeats < 1 {
        return Err(invalid("n_repeats must be at least 1"));
    }
    if rows.is_empty() || rows.end > panel.t() {
        return Err(invalid(format!("rows {rows:?} outside panel of length {}", panel.t())));
    }
    if model.n_features != panel.n() {
        return Err(invalid(format!(
            "model has {} features, panel {} controls",
            model.n_features,
            panel.n()
        )));
    }
    let x: Vec<Vec<f64>> = rows.clone().map(|t| panel.x_row(t)).collect();
    let y: Vec<f64> = rows.clone().map(|t| panel.treated()[t]).collect();
    let score = |x: &[Vec<f64>]| {
        let errs: Vec<f64> = x.iter().zip(&y).map(|(row, yt)| yt - model.predict(row)).collect();
        stats::rmse(&errs)
    };
    let baseline = score(&x);

    let importances = (0..panel.n())
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, rng::domain::IMPORTANCE, i as u64);
            let mut column: Vec<f64> = x.iter().map(|r| r[i]).collect();
            let mut shuffled = x.clone();
            let deltas: Vec<f64> = (0..n_repeats)
                .map(|_| {
                    column.shuffle(&mut rng);
                    for (row, v) in shuffled.iter_mut().zip(&column) {
                        row[i] = *v;
                    }
                    score(&shuffled) - baseline
                })
                .collect();
            stats::mean(&deltas)
        })
        .collect();
    Ok(importances)
}
