//! Elastic-net weights by cyclic coordinate descent.
//!
//! Minimizes
//!
//! ```text
//! (1 / 2n) sum_t (y_t - mu - <w, x_t>)^2 + lambda ((1 - a)/2 |w|_2^2 + a |w|_1)
//! ```
//!
//! over the intercept `mu` and unrestricted weights `w`. The data are centred,
//! the weights solved for, and `mu` recovered from the means afterwards.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{gather, span};
use crate::error::{invalid, Error, Result};
use crate::panel::{split_range, Panel, SplitSpec};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnetOptions {
    /// Convergence threshold on the largest coordinate change in a sweep.
    pub tol: f64,
    pub max_iter: usize,
    /// Scale each control to unit variance before fitting (the penalty then
    /// acts on standardized coefficients). Off by default.
    pub standardize: bool,
}

impl Default for EnetOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100_000,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnetFit {
    pub mu: f64,
    pub omega: Vec<f64>,
    pub lambda: f64,
    pub alpha_mix: f64,
    pub objective: f64,
    /// Coordinate sweeps performed.
    pub iterations: usize,
    pub standardized: bool,
    pub training_range: Range<usize>,
}

impl EnetFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.mu + stats::sum(self.omega.iter().zip(x).map(|(w, v)| w * v))
    }
}

pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Value of the penalized objective for `(mu, omega)` on row-major data.
pub fn enet_objective(x: &[Vec<f64>], y: &[f64], mu: f64, omega: &[f64], lambda: f64, alpha_mix: f64) -> f64 {
    let n = y.len() as f64;
    let rss = stats::sum(x.iter().zip(y).map(|(row, yt)| {
        let r = yt - mu - stats::sum(row.iter().zip(omega).map(|(a, b)| a * b));
        r * r
    }));
    let l2: f64 = omega.iter().map(|w| w * w).sum();
    let l1: f64 = omega.iter().map(|w| w.abs()).sum();
    rss / (2.0 * n) + lambda * ((1.0 - alpha_mix) / 2.0 * l2 + alpha_mix * l1)
}

/// Elastic-net fit on row-major data.
pub fn fit_enet_on(x: &[Vec<f64>], y: &[f64], lambda: f64, alpha_mix: f64, opts: &EnetOptions) -> Result<EnetFit> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("lambda = {lambda} must be finite and >= 0")));
    }
    if !(0.0..=1.0).contains(&alpha_mix) {
        return Err(invalid(format!("alpha_mix = {alpha_mix} must lie in [0, 1]")));
    }
    if x.is_empty() || x.len() != y.len() {
        return Err(invalid("no training rows"));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite data"));
    }
    let n_rows = y.len();
    let n = n_rows as f64;
    let p = x[0].len();

    let x_mean: Vec<f64> = (0..p)
        .map(|j| stats::sum(x.iter().map(|r| r[j])) / n)
        .collect();
    let y_mean = stats::mean(y);
    let mut cols: Vec<Vec<f64>> = (0..p)
        .map(|j| x.iter().map(|r| r[j] - x_mean[j]).collect())
        .collect();
    let scale: Vec<f64> = if opts.standardize {
        cols.iter()
            .map(|c| {
                let sd = (c.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
                if sd > 0.0 { sd } else { 1.0 }
            })
            .collect()
    } else {
        vec![1.0; p]
    };
    for (c, s) in cols.iter_mut().zip(&scale) {
        c.iter_mut().for_each(|v| *v /= s);
    }
    let curvature: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / n).collect();

    let mut w = vec![0.0; p];
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let l1 = lambda * alpha_mix;
    let l2 = lambda * (1.0 - alpha_mix);
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            let denom = curvature[j] + l2;
            let old = w[j];
            let new = if denom > 0.0 {
                let rho = cols[j].iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / n + curvature[j] * old;
                soft_threshold(rho, l1) / denom
            } else {
                0.0
            };
            let delta = new - old;
            if delta != 0.0 {
                for (r, a) in resid.iter_mut().zip(&cols[j]) {
                    *r -= delta * a;
                }
                w[j] = new;
            }
            max_change = max_change.max(delta.abs());
        }
        if !max_change.is_finite() {
            return Err(Error::Divergence("elastic-net coordinate update is not finite".into()));
        }
        if max_change < opts.tol || sweeps >= opts.max_iter {
            break;
        }
    }

    let omega: Vec<f64> = w.iter().zip(&scale).map(|(v, s)| v / s).collect();
    let mu = y_mean - stats::sum(omega.iter().zip(&x_mean).map(|(a, b)| a * b));
    let objective = if opts.standardize {
        let rss = stats::sum(resid.iter().map(|r| r * r));
        let l2n: f64 = w.iter().map(|v| v * v).sum();
        let l1n: f64 = w.iter().map(|v| v.abs()).sum();
        rss / (2.0 * n) + lambda * ((1.0 - alpha_mix) / 2.0 * l2n + alpha_mix * l1n)
    } else {
        enet_objective(x, y, mu, &omega, lambda, alpha_mix)
    };
    if !objective.is_finite() {
        return Err(Error::Divergence("elastic-net objective is not finite".into()));
    }
    Ok(EnetFit {
        mu,
        omega,
        lambda,
        alpha_mix,
        objective,
        iterations: sweeps,
        standardized: opts.standardize,
        training_range: 0..0,
    })
}

pub fn fit_enet(panel: &Panel, rows: &[usize], lambda: f64, alpha_mix: f64, opts: &EnetOptions) -> Result<EnetFit> {
    let (x, y) = gather(panel, rows)?;
    let mut fit = fit_enet_on(&x, &y, lambda, alpha_mix, opts)?;
    fit.training_range = span(rows);
    Ok(fit)
}

/// Optimality residual per coordinate for an unstandardized fit: the
/// distance of zero from the subdifferential of the objective in `w_j`.
pub fn kkt_residuals(fit: &EnetFit, x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let resid: Vec<f64> = x.iter().zip(y).map(|(row, yt)| yt - fit.predict(row)).collect();
    let l1 = fit.lambda * fit.alpha_mix;
    let l2 = fit.lambda * (1.0 - fit.alpha_mix);
    (0..fit.omega.len())
        .map(|j| {
            let grad = -stats::sum(x.iter().zip(&resid).map(|(row, r)| row[j] * r)) / n + l2 * fit.omega[j];
            let w = fit.omega[j];
            if w != 0.0 {
                (grad + l1 * w.signum()).abs()
            } else {
                (grad.abs() - l1).max(0.0)
            }
        })
        .collect()
}

/// Default tuning grid: six penalties log-spaced from the smallest value
/// that zeroes every lasso weight down to 1e-4 of it, crossed with mixing
/// fractions {0.1, 0.5, 0.9, 1.0}.
pub fn default_enet_grid(panel: &Panel, rows: &[usize]) -> Result<Vec<(f64, f64)>> {
    let (x, y) = gather(panel, rows)?;
    let n = y.len() as f64;
    let y_mean = stats::mean(&y);
    let lambda_max = (0..panel.n())
        .map(|j| {
            let m = x.iter().map(|r| r[j]).sum::<f64>() / n;
            (x.iter().zip(&y).map(|(r, yt)| (r[j] - m) * (yt - y_mean)).sum::<f64>() / n).abs()
        })
        .fold(0.0, f64::max)
        .max(1e-8);
    let lambdas: Vec<f64> = (0..6).map(|i| lambda_max * 10f64.powf(-0.8 * i as f64)).collect();
    Ok(lambdas
        .iter()
        .flat_map(|&l| [0.1, 0.5, 0.9, 1.0].map(|a| (l, a)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnetTuning {
    /// Fit on the estimation block with the selected hyperparameters.
    pub fit: EnetFit,
    /// `(lambda, alpha_mix, validation RMSPE)` per grid point.
    pub scores: Vec<(f64, f64, f64)>,
}

/// Grid search on the temporal split; ties go to the larger penalty.
pub fn tune_enet(panel: &Panel, split: SplitSpec, grid: &[(f64, f64)], opts: &EnetOptions) -> Result<EnetTuning> {
    if grid.is_empty() {
        return Err(invalid("elastic-net grid is empty"));
    }
    let (est, val) = split_range(panel.t0(), split)?;
    let rows: Vec<usize> = est.collect();
    let mut best: Option<(EnetFit, f64)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for &(lambda, alpha_mix) in grid {
        let fit = fit_enet(panel, &rows, lambda, alpha_mix, opts)?;
        let errs: Vec<f64> = val
            .clone()
            .map(|t| panel.treated()[t] - fit.predict(&panel.x_row(t)))
            .collect();
        let score = stats::rmse(&errs);
        scores.push((lambda, alpha_mix, score));
        let better = match &best {
            None => true,
            Some((b, s)) => score < *s || (score == *s && lambda > b.lambda),
        };
        if better {
            best = Some((fit, score));
        }
    }
    Ok(EnetTuning {
        fit: best.expect("non-empty grid").0,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let d = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| d.sample(rng)).collect()
    }

    #[test]
    fn zero_penalty_is_ols_with_intercept() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = noise(&mut rng, 50);
        let b = noise(&mut rng, 50);
        let e = noise(&mut rng, 50);
        let y: Vec<f64> = (0..50).map(|t| 3.0 + 2.0 * a[t] - b[t] + 0.1 * e[t]).collect();
        let x: Vec<Vec<f64>> = (0..50).map(|t| vec![a[t], b[t]]).collect();
        let fit = fit_enet_on(&x, &y, 0.0, 0.5, &EnetOptions::default()).unwrap();
        // Normal equations: X'r = 0 and sum r = 0.
        let r: Vec<f64> = x.iter().zip(&y).map(|(row, yt)| yt - fit.predict(row)).collect();
        assert!(r.iter().sum::<f64>().abs() < 1e-8);
        for j in 0..2 {
            assert!(x.iter().zip(&r).map(|(row, rt)| row[j] * rt).sum::<f64>().abs() < 1e-5);
        }
        assert!((fit.omega[0] - 2.0).abs() < 0.1);
    }

    #[test]
    fn large_penalty_zeroes_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = noise(&mut rng, 30);
        let y: Vec<f64> = a.iter().map(|v| 1.0 + v).collect();
        let x: Vec<Vec<f64>> = a.iter().map(|v| vec![*v]).collect();
        let fit = fit_enet_on(&x, &y, 1e3, 0.7, &EnetOptions::default()).unwrap();
        assert_eq!(fit.omega, vec![0.0]);
        assert!((fit.mu - stats::mean(&y)).abs() < 1e-12);
    }

    #[test]
    fn single_predictor_matches_soft_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = noise(&mut rng, 40);
        let m = stats::mean(&raw);
        let xc: Vec<f64> = raw.iter().map(|v| v - m).collect();
        let e = noise(&mut rng, 40);
        let y: Vec<f64> = xc.iter().zip(&e).map(|(a, b)| 0.8 * a + b).collect();
        let ym = stats::mean(&y);
        let yc: Vec<f64> = y.iter().map(|v| v - ym).collect();
        let n = 40.0;
        let xy = xc.iter().zip(&yc).map(|(a, b)| a * b).sum::<f64>() / n;
        let xx = xc.iter().map(|a| a * a).sum::<f64>() / n;
        let x: Vec<Vec<f64>> = xc.iter().map(|v| vec![*v]).collect();
        for lambda in [0.0, 0.05, 0.3, 2.0] {
            let fit = fit_enet_on(&x, &y, lambda, 1.0, &EnetOptions::default()).unwrap();
            let expected = soft_threshold(xy, lambda) / xx;
            assert!((fit.omega[0] - expected).abs() < 1e-6, "lambda {lambda}");
        }
    }

    #[test]
    fn kkt_holds_on_random_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cols: Vec<Vec<f64>> = (0..5).map(|_| noise(&mut rng, 60)).collect();
        let e = noise(&mut rng, 60);
        let y: Vec<f64> = (0..60).map(|t| cols[0][t] - 0.5 * cols[3][t] + e[t]).collect();
        let x: Vec<Vec<f64>> = (0..60).map(|t| cols.iter().map(|c| c[t]).collect()).collect();
        let opts = EnetOptions::default();
        let fit = fit_enet_on(&x, &y, 0.1, 0.5, &opts).unwrap();
        assert!(kkt_residuals(&fit, &x, &y).iter().all(|r| *r < 10.0 * opts.tol));
        assert!(fit.objective <= enet_objective(&x, &y, stats::mean(&y), &[0.0; 5], 0.1, 0.5));
    }

    #[test]
    fn invalid_hyperparameters() {
        let x = vec![vec![1.0], vec![2.0]];
        let y = vec![1.0, 2.0];
        assert!(fit_enet_on(&x, &y, -1.0, 0.5, &EnetOptions::default()).is_err());
        assert!(fit_enet_on(&x, &y, 1.0, 1.5, &EnetOptions::default()).is_err());
    }

    #[test]
    fn default_grid_has_24_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cols: Vec<Vec<f64>> = (0..3).map(|_| noise(&mut rng, 30)).collect();
        let p = Panel::from_columns(noise(&mut rng, 30), cols, 25).unwrap();
        let rows: Vec<usize> = (0..20).collect();
        let grid = default_enet_grid(&p, &rows).unwrap();
        assert_eq!(grid.len(), 24);
        let single = tune_enet(&p, SplitSpec::default(), &grid[..1], &EnetOptions::default()).unwrap();
        assert_eq!((single.fit.lambda, single.fit.alpha_mix), grid[0]);
    }

    #[test]
    fn standardized_fit_predicts_sensibly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a: Vec<f64> = noise(&mut rng, 40).iter().map(|v| 100.0 * v).collect();
        let y: Vec<f64> = a.iter().map(|v| 0.01 * v + 2.0).collect();
        let x: Vec<Vec<f64>> = a.iter().map(|v| vec![*v]).collect();
        let opts = EnetOptions { standardize: true, ..Default::default() };
        let fit = fit_enet_on(&x, &y, 0.0, 1.0, &opts).unwrap();
        assert!((fit.omega[0] - 0.01).abs() < 1e-8);
        assert!((fit.mu - 2.0).abs() < 1e-6);
    }
}
