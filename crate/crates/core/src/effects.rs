//! Counterfactual gaps, average treatment effect estimators, block-bootstrap
//! uncertainty and fit diagnostics.

use std::io::Write;
use std::ops::Range;

use chrono::NaiveDate;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimator::{EstimatorTag, FittedModel};
use crate::panel::Panel;
use crate::rng;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualFit {
    pub labels: Vec<NaiveDate>,
    pub observed: Vec<f64>,
    pub predictions: Vec<f64>,
    /// `observed - predictions`, every period.
    pub gaps: Vec<f64>,
    pub estimator_tag: EstimatorTag,
    pub t0: usize,
}

impl CounterfactualFit {
    pub fn from_predictions(panel: &Panel, predictions: Vec<f64>, tag: EstimatorTag) -> Result<Self> {
        if predictions.len() != panel.t() {
            return Err(Error::Alignment(format!(
                "{} predictions for {} periods",
                predictions.len(),
                panel.t()
            )));
        }
        let gaps = panel
            .treated()
            .iter()
            .zip(&predictions)
            .map(|(y, p)| y - p)
            .collect();
        Ok(Self {
            labels: panel.labels().to_vec(),
            observed: panel.treated().to_vec(),
            predictions,
            gaps,
            estimator_tag: tag,
            t0: panel.t0(),
        })
    }

    pub fn t(&self) -> usize {
        self.gaps.len()
    }

    pub fn pre_gaps(&self) -> &[f64] {
        &self.gaps[..self.t0]
    }

    pub fn post_gaps(&self) -> &[f64] {
        &self.gaps[self.t0..]
    }

    /// Writes `week_start, observed, predicted, gap`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["week_start", "observed", "predicted", "gap"])?;
        for t in 0..self.t() {
            w.write_record([
                self.labels[t].format("%Y-%m-%d").to_string(),
                format!("{}", self.observed[t]),
                format!("{}", self.predictions[t]),
                format!("{}", self.gaps[t]),
            ])?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<gap csv>".into(),
            source,
        })?;
        Ok(())
    }
}

/// Imputes the untreated outcome for every period. Refuses models whose
/// training rows reach into the post-treatment block.
pub fn counterfactual(panel: &Panel, model: &FittedModel) -> Result<CounterfactualFit> {
    let range = model.training_range();
    if range.end > panel.t0() {
        return Err(Error::Leakage {
            start: range.start,
            end: range.end,
            t0: panel.t0(),
        });
    }
    CounterfactualFit::from_predictions(panel, model.predict_panel(panel), model.tag())
}

/// Mean post-treatment gap.
pub fn ate_hat(fit: &CounterfactualFit) -> f64 {
    stats::mean(fit.post_gaps())
}

/// Post-treatment mean minus pre-treatment mean of the treated series.
pub fn ate_naive(panel: &Panel) -> f64 {
    let y = panel.treated();
    stats::mean(&y[panel.t0()..]) - stats::mean(&y[..panel.t0()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub se: f64,
    /// Percentile interval.
    pub ci_low: f64,
    pub ci_high: f64,
    /// `estimate -/+ z * se`.
    pub normal_low: f64,
    pub normal_high: f64,
    pub level: f64,
    pub n_boot: usize,
    pub block_length: usize,
    pub seed: u64,
}

/// Means of `n_boot` circular moving-block bootstrap resamples of `series`.
/// Replicate `r` draws from stream `r` of `seed`.
pub fn block_bootstrap_means(series: &[f64], n_boot: usize, block_length: usize, seed: u64) -> Result<Vec<f64>> {
    let n = series.len();
    if n == 0 {
        return Err(invalid("cannot bootstrap an empty series"));
    }
    if n_boot < 1 {
        return Err(invalid("n_boot must be at least 1"));
    }
    if block_length < 1 || block_length > n {
        return Err(invalid(format!("block length {block_length} outside 1..={n}")));
    }
    let n_blocks = n.div_ceil(block_length);
    Ok((0..n_boot)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, rng::domain::BOOTSTRAP, r as u64);
            let mut counts = vec![0u32; n];
            let mut taken = 0;
            for _ in 0..n_blocks {
                let start = rng.gen_range(0..n);
                for j in 0..block_length {
                    if taken == n {
                        break;
                    }
                    counts[(start + j) % n] += 1;
                    taken += 1;
                }
            }
            // Index-order accumulation makes the mean independent of block order.
            stats::sum(series.iter().zip(&counts).map(|(v, c)| v * f64::from(*c))) / n as f64
        })
        .collect())
}

/// Standard error and intervals for the ATE from the post-period gaps.
pub fn block_bootstrap_ci(
    fit: &CounterfactualFit,
    n_boot: usize,
    block_length: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi> {
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!("level {level} must lie in (0, 1)")));
    }
    let gaps = fit.post_gaps();
    let means = block_bootstrap_means(gaps, n_boot, block_length, seed)?;
    let estimate = stats::mean(gaps);
    let se = stats::sample_sd(&means);
    let sorted = stats::sorted(&means);
    let tail = (1.0 - level) / 2.0;
    let z = stats::normal_quantile(1.0 - tail);
    Ok(BootstrapCi {
        se,
        ci_low: stats::quantile_sorted(&sorted, tail),
        ci_high: stats::quantile_sorted(&sorted, 1.0 - tail),
        normal_low: estimate - z * se,
        normal_high: estimate + z * se,
        level,
        n_boot,
        block_length,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub estimator: EstimatorTag,
    pub ate_hat: f64,
    pub ate_naive: f64,
    pub per_period_gaps: Vec<f64>,
    pub bootstrap: BootstrapCi,
}

pub fn effect_report(
    panel: &Panel,
    fit: &CounterfactualFit,
    n_boot: usize,
    block_length: usize,
    level: f64,
    seed: u64,
) -> Result<EffectReport> {
    Ok(EffectReport {
        estimator: fit.estimator_tag,
        ate_hat: ate_hat(fit),
        ate_naive: ate_naive(panel),
        per_period_gaps: fit.post_gaps().to_vec(),
        bootstrap: block_bootstrap_ci(fit, n_boot, block_length, level, seed)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    pub pre_rmspe: f64,
    pub pre_mae: f64,
    pub post_rmspe: f64,
    pub post_mae: f64,
    /// `post / pre`; `None` when the pre-period value is zero.
    pub ratio_rmspe: Option<f64>,
    pub ratio_mae: Option<f64>,
    /// Sample standard deviation of the post-period predictions.
    pub post_std: f64,
    pub avg_gap_pre: f64,
    pub avg_gap_post: f64,
}

pub fn fit_metrics(fit: &CounterfactualFit) -> FitMetrics {
    fit_metrics_on(fit, 0..fit.t0, fit.t0..fit.t())
}

/// Metrics with explicit "pre" and "post" ranges, e.g. estimation and
/// validation blocks of a hold-out split.
pub fn fit_metrics_on(fit: &CounterfactualFit, pre: Range<usize>, post: Range<usize>) -> FitMetrics {
    let pre_g = &fit.gaps[pre];
    let post_g = &fit.gaps[post.clone()];
    let ratio = |post: f64, pre: f64| (pre > 0.0).then(|| post / pre);
    let pre_rmspe = stats::rmse(pre_g);
    let pre_mae = stats::mae(pre_g);
    let post_rmspe = stats::rmse(post_g);
    let post_mae = stats::mae(post_g);
    FitMetrics {
        pre_rmspe,
        pre_mae,
        post_rmspe,
        post_mae,
        ratio_rmspe: ratio(post_rmspe, pre_rmspe),
        ratio_mae: ratio(post_mae, pre_mae),
        post_std: stats::sample_sd(&fit.predictions[post]),
        avg_gap_pre: stats::mean(pre_g),
        avg_gap_post: stats::mean(post_g),
    }
}
