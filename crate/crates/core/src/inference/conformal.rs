//! Exact permutation tests on counterfactual residuals.
//!
//! Under a sharp null trajectory the post-period outcomes are adjusted by the
//! hypothesized effects, the estimator is refit on every period, and the
//! statistic of the post block is compared with its value under permutations
//! of the full residual vector. The p-value is the share of permutations whose
//! statistic is at least the observed one; the observed ordering is always in
//! the comparison set.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::estimator::EstimatorSpec;
use crate::panel::Panel;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PermutationScheme {
    /// Identity plus `n_samples` uniformly drawn permutations.
    Iid { n_samples: usize, seed: u64 },
    /// All `T` cyclic shifts.
    MovingBlock,
}

/// `((1 / sqrt(n)) * sum |u_t|^q)^(1/q)` over the given residuals.
pub fn conformal_statistic(residuals: &[f64], q: f64) -> Result<f64> {
    if residuals.is_empty() {
        return Err(invalid("empty residual vector"));
    }
    if q.is_nan() || q < 1.0 {
        return Err(invalid(format!("norm order q = {q} must be >= 1")));
    }
    Ok(statistic(residuals.iter().copied(), residuals.len(), q))
}

fn statistic(values: impl Iterator<Item = f64>, n: usize, q: f64) -> f64 {
    let scale = (n as f64).sqrt();
    if q == 1.0 {
        values.map(f64::abs).sum::<f64>() / scale
    } else {
        (values.map(|u| u.abs().powf(q)).sum::<f64>() / scale).powf(1.0 / q)
    }
}

/// Statistic under each permutation of the scheme; entry 0 is the observed
/// (identity) ordering. `residuals` covers all `T` periods and the post block
/// starts at `t0`.
pub fn permutation_statistics(residuals: &[f64], t0: usize, scheme: PermutationScheme, q: f64) -> Result<Vec<f64>> {
    let t = residuals.len();
    if t0 >= t {
        return Err(invalid(format!("post block {t0}..{t} is empty")));
    }
    if q.is_nan() || q < 1.0 {
        return Err(invalid(format!("norm order q = {q} must be >= 1")));
    }
    let n_post = t - t0;
    let observed = statistic(residuals[t0..].iter().copied(), n_post, q);
    Ok(match scheme {
        PermutationScheme::MovingBlock => (0..t)
            .into_par_iter()
            .map(|shift| {
                if shift == 0 {
                    observed
                } else {
                    statistic((t0..t).map(|s| residuals[(s + shift) % t]), n_post, q)
                }
            })
            .collect(),
        PermutationScheme::Iid { n_samples, seed } => {
            let draws: Vec<f64> = (0..n_samples)
                .into_par_iter()
                .map(|i| {
                    let mut rng = rng::stream(seed, rng::domain::PERMUTATION, i as u64);
                    let picked = index::sample(&mut rng, t, n_post);
                    statistic(picked.iter().map(|s| residuals[s]), n_post, q)
                })
                .collect();
            std::iter::once(observed).chain(draws).collect()
        }
    })
}

/// Observed statistic, p-value and the full permutation distribution.
pub fn conformal_pvalue(residuals: &[f64], t0: usize, scheme: PermutationScheme, q: f64) -> Result<(f64, f64, Vec<f64>)> {
    let stats = permutation_statistics(residuals, t0, scheme, q)?;
    let observed = stats[0];
    let at_least = stats.iter().filter(|s| **s >= observed).count();
    let p = at_least as f64 / stats.len() as f64;
    Ok((observed, p, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub low: f64,
    pub high: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Self {
        let low = values.iter().copied().fold(f64::INFINITY, f64::min);
        let high = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins.max(1)];
        let width = (high - low) / counts.len() as f64;
        for v in values {
            let b = if width > 0.0 {
                (((v - low) / width) as usize).min(counts.len() - 1)
            } else {
                0
            };
            counts[b] += 1;
        }
        Self { low, high, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalResult {
    pub statistic: f64,
    pub p_value: f64,
    pub scheme: PermutationScheme,
    pub q: f64,
    pub null_trajectory: Vec<f64>,
    pub n_permutations: usize,
    /// Permutation statistics binned into 50 equal-width bins.
    pub histogram: Histogram,
}

/// Tests the sharp null `tau_t = null_trajectory[t - t0]` for every post
/// period.
pub fn conformal_test(
    panel: &Panel,
    spec: &EstimatorSpec,
    null_trajectory: &[f64],
    scheme: PermutationScheme,
    q: f64,
) -> Result<ConformalResult> {
    let t0 = panel.t0();
    if null_trajectory.len() != panel.t() - t0 {
        return Err(invalid(format!(
            "null trajectory has {} entries, post period {}",
            null_trajectory.len(),
            panel.t() - t0
        )));
    }
    let mut adjusted = panel.treated().to_vec();
    for (y, tau) in adjusted[t0..].iter_mut().zip(null_trajectory) {
        *y -= tau;
    }
    let adjusted = panel.with_treated(adjusted)?;
    let all: Vec<usize> = (0..panel.t()).collect();
    let model = spec.fit(&adjusted, &all)?;
    let residuals: Vec<f64> = adjusted
        .treated()
        .iter()
        .zip(model.predict_panel(&adjusted))
        .map(|(y, p)| y - p)
        .collect();
    let (statistic, p_value, stats) = conformal_pvalue(&residuals, t0, scheme, q)?;
    Ok(ConformalResult {
        statistic,
        p_value,
        scheme,
        q,
        null_trajectory: null_trajectory.to_vec(),
        n_permutations: stats.len(),
        histogram: Histogram::new(&stats, 50),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecTestRow {
    pub kappa: usize,
    pub p_iid: f64,
    pub p_moving_block: f64,
}

/// Pre-period specification check: for each `kappa` the panel is cut at
/// `t0`, a pseudo-onset is placed `kappa` periods earlier and the zero null
/// is tested under both schemes.
pub fn placebo_specification_test(
    panel: &Panel,
    spec: &EstimatorSpec,
    kappa_max: usize,
    n_samples: usize,
    seed: u64,
    q: f64,
) -> Result<Vec<SpecTestRow>> {
    let t0 = panel.t0();
    if kappa_max == 0 || kappa_max >= t0 {
        return Err(invalid(format!("kappa_max = {kappa_max} must lie in 1..{t0}")));
    }
    (1..=kappa_max)
        .map(|kappa| {
            let pseudo = panel.truncated(t0, t0 - kappa)?;
            let zero = vec![0.0; kappa];
            let iid = conformal_test(&pseudo, spec, &zero, PermutationScheme::Iid { n_samples, seed }, q)?;
            let mb = conformal_test(&pseudo, spec, &zero, PermutationScheme::MovingBlock, q)?;
            Ok(SpecTestRow {
                kappa,
                p_iid: iid.p_value,
                p_moving_block: mb.p_value,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::ScmOptions;

    #[test]
    fn statistic_examples() {
        assert_eq!(conformal_statistic(&[0.0, 0.0, 0.0], 1.0).unwrap(), 0.0);
        let s1 = conformal_statistic(&[3.0, 4.0], 1.0).unwrap();
        assert!((s1 - 7.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((s1 - 4.949_747_468_305_833).abs() < 1e-12);
        let s2 = conformal_statistic(&[3.0, -4.0], 2.0).unwrap();
        assert!((s2 - (25.0 / 2f64.sqrt()).sqrt()).abs() < 1e-12);
        assert!((s2 - 4.204_482_076_268_573).abs() < 1e-12);
        assert!(conformal_statistic(&[], 1.0).is_err());
        assert!(conformal_statistic(&[1.0], 0.5).is_err());
    }

    #[test]
    fn constant_residuals_give_p_one() {
        let u = vec![2.5; 12];
        for scheme in [PermutationScheme::MovingBlock, PermutationScheme::Iid { n_samples: 300, seed: 3 }] {
            let (_, p, _) = conformal_pvalue(&u, 8, scheme, 1.0).unwrap();
            assert_eq!(p, 1.0);
        }
    }

    #[test]
    fn moving_block_matches_enumeration_on_small_example() {
        let u = [0.1, -0.3, 0.2, 0.05, -0.1, 0.15, 2.0, -1.8];
        let (obs, p, stats) = conformal_pvalue(&u, 6, PermutationScheme::MovingBlock, 1.0).unwrap();
        assert_eq!(stats.len(), 8);
        let by_hand: Vec<f64> = (0..8)
            .map(|j| (u[(6 + j) % 8].abs() + u[(7 + j) % 8].abs()) / 2f64.sqrt())
            .collect();
        let at_least = by_hand.iter().filter(|s| **s >= obs).count();
        assert_eq!(p, at_least as f64 / 8.0);
        // The two large residuals sit together only in the observed ordering.
        assert_eq!(p, 1.0 / 8.0);
    }

    #[test]
    fn p_value_floor_and_grid() {
        let u: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let (_, p, stats) = conformal_pvalue(&u, 15, PermutationScheme::Iid { n_samples: 99, seed: 1 }, 1.0).unwrap();
        assert_eq!(stats.len(), 100);
        assert!(p >= 0.01);
        assert!(((p * 100.0).round() - p * 100.0).abs() < 1e-9);
        let (_, p2, _) = conformal_pvalue(&u, 15, PermutationScheme::Iid { n_samples: 99, seed: 1 }, 1.0).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn perfect_fit_under_true_null_gives_p_one() {
        // Treated is an exact copy of control 1 plus a known post-period effect.
        let x1: Vec<f64> = (0..20).map(|i| (i as f64 * 1.3).sin() * 5.0 + 10.0).collect();
        let x2: Vec<f64> = (0..20).map(|i| (i as f64 * 0.4).cos() * 3.0).collect();
        let effect: Vec<f64> = (0..5).map(|i| 4.0 + i as f64).collect();
        let mut y = x1.clone();
        for (v, e) in y[15..].iter_mut().zip(&effect) {
            *v += e;
        }
        let panel = Panel::from_columns(y, vec![x1, x2], 15).unwrap();
        let spec = EstimatorSpec::Scm(ScmOptions::default());
        let r = conformal_test(&panel, &spec, &effect, PermutationScheme::MovingBlock, 1.0).unwrap();
        assert!(r.statistic < 1e-6);
        // Residuals are zero up to solver rounding; every shift ties or exceeds.
        assert!(r.p_value >= 0.5);
        assert_eq!(r.histogram.counts.iter().sum::<usize>(), 20);
        assert!(conformal_test(&panel, &spec, &effect[..3], PermutationScheme::MovingBlock, 1.0).is_err());
    }

    #[test]
    fn kappa_must_be_below_t0() {
        let panel = Panel::from_columns(vec![1.0; 12], vec![(0..12).map(f64::from).collect()], 8).unwrap();
        let spec = EstimatorSpec::Scm(ScmOptions::default());
        assert!(placebo_specification_test(&panel, &spec, 8, 10, 0, 1.0).is_err());
        let rows = placebo_specification_test(&panel, &spec, 2, 10, 0, 1.0).unwrap();
        assert_eq!(rows.len(), 2);
    }
}
