use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{gather, span};
use crate::error::{invalid, Error, Result};
use crate::panel::Panel;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScmOptions {
    /// Stop once an iteration improves the objective by less than this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ScmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100_000,
        }
    }
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmWeights {
    pub omega: Vec<f64>,
    /// Sum of squared residuals at `omega`.
    pub objective: f64,
    pub iterations: usize,
    pub trace_len: usize,
    pub training_range: Range<usize>,
    /// Objective after each accepted iteration, starting from uniform weights.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl ScmWeights {
    pub fn predict(&self, x: &[f64]) -> f64 {
        stats::sum(self.omega.iter().zip(x).map(|(w, v)| w * v))
    }
}

/// Euclidean projection onto the probability simplex (sort-based, exact up
/// to rounding).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    // Remove the rounding drift so the weights sum to one.
    let s: f64 = stats::sum(w.iter().copied());
    if s > 0.0 {
        w.iter_mut().for_each(|x| *x /= s);
    }
    w
}

fn objective(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> f64 {
    stats::sum(x.iter().zip(y).map(|(row, yt)| {
        let r = yt - stats::sum(row.iter().zip(w).map(|(a, b)| a * b));
        r * r
    }))
}

fn gradient(x: &[Vec<f64>], y: &[f64], w: &[f64]) -> Vec<f64> {
    let n = w.len();
    let resid: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(row, yt)| yt - stats::sum(row.iter().zip(w).map(|(a, b)| a * b)))
        .collect();
    (0..n)
        .map(|i| -2.0 * stats::sum(x.iter().zip(&resid).map(|(row, r)| row[i] * r)))
        .collect()
}

/// Projected gradient descent with backtracking for
/// `min sum_t (y_t - <w, x_t>)^2` over the simplex, on row-major data.
pub fn fit_scm_on(x: &[Vec<f64>], y: &[f64], opts: &ScmOptions) -> Result<(Vec<f64>, f64, usize, Vec<f64>)> {
    if x.is_empty() {
        return Err(invalid("no training rows"));
    }
    let n = x[0].len();
    if n == 0 {
        return Err(invalid("no control units"));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("non-finite data"));
    }
    if n == 1 {
        let w = vec![1.0];
        let f = objective(x, y, &w);
        return Ok((w, f, 0, vec![f]));
    }

    let frob: f64 = x.iter().flatten().map(|v| v * v).sum();
    let mut step = if frob > 0.0 { 1.0 / (2.0 * frob) } else { 1.0 };
    let mut w = vec![1.0 / n as f64; n];
    let mut f = objective(x, y, &w);
    let mut trace = vec![f];
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let g = gradient(x, y, &w);
        step *= 2.0;
        let (next, f_next) = loop {
            let cand: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - step * gi).collect();
            let cand = project_to_simplex(&cand);
            let diff: Vec<f64> = cand.iter().zip(&w).map(|(a, b)| a - b).collect();
            let f_cand = objective(x, y, &cand);
            let lin: f64 = g.iter().zip(&diff).map(|(a, b)| a * b).sum();
            let quad: f64 = diff.iter().map(|d| d * d).sum::<f64>() / (2.0 * step);
            if f_cand <= f + lin + quad || step < 1e-300 {
                break (cand, f_cand);
            }
            step *= 0.5;
        };
        if !f_next.is_finite() {
            return Err(Error::Divergence("non-finite synthetic-control objective".into()));
        }
        if f_next > f {
            // Rounding-level increase: the current point is already optimal.
            break;
        }
        let improvement = f - f_next;
        let moved = next != w;
        w = next;
        f = f_next;
        trace.push(f);
        if improvement < opts.tol || !moved {
            break;
        }
    }
    Ok((w, f, iterations, trace))
}

/// Simplex-constrained least-squares weights of the treated series on the
/// controls over `rows`.
pub fn fit_scm(panel: &Panel, rows: &[usize], opts: &ScmOptions) -> Result<ScmWeights> {
    let (x, y) = gather(panel, rows)?;
    let (omega, objective, iterations, trace) = fit_scm_on(&x, &y, opts)?;
    Ok(ScmWeights {
        omega,
        objective,
        iterations,
        trace_len: trace.len(),
        training_range: span(rows),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn panel_from(y: Vec<f64>, controls: Vec<Vec<f64>>) -> Panel {
        let t = y.len();
        Panel::from_columns(y, controls, t - 1).unwrap()
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_to_simplex(&[0.2, 0.8]), vec![0.2, 0.8]);
        assert_eq!(project_to_simplex(&[2.0, 0.0]), vec![1.0, 0.0]);
        let w = project_to_simplex(&[0.5, 0.5, 0.5]);
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn single_control_gets_full_weight() {
        let p = panel_from(vec![5.0, 1.0, 3.0, 0.0], vec![vec![0.0, 1.0, 2.0, 3.0]]);
        let w = fit_scm(&p, &[0, 1, 2], &ScmOptions::default()).unwrap();
        assert_eq!(w.omega, vec![1.0]);
    }

    #[test]
    fn exact_copy_of_one_control() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let controls: Vec<Vec<f64>> = (0..3).map(|_| (0..30).map(|_| rng.gen_range(0.0..10.0)).collect()).collect();
        let p = panel_from(controls[1].clone(), controls);
        let rows: Vec<usize> = (0..29).collect();
        let w = fit_scm(&p, &rows, &ScmOptions::default()).unwrap();
        assert!((w.omega[1] - 1.0).abs() < 1e-6, "{:?}", w.omega);
        assert!(w.objective < 1e-8);
    }

    #[test]
    fn two_control_mixture_matches_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x1: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..10.0)).collect();
        let x2: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..10.0)).collect();
        let y: Vec<f64> = x1
            .iter()
            .zip(&x2)
            .map(|(a, b)| 0.3 * a + 0.7 * b + rng.gen_range(-1e-4..1e-4))
            .collect();
        let p = panel_from(y.clone(), vec![x1.clone(), x2.clone()]);
        let rows: Vec<usize> = (0..39).collect();
        let w = fit_scm(&p, &rows, &ScmOptions::default()).unwrap();
        assert!((w.omega[0] - 0.3).abs() < 1e-3 && (w.omega[1] - 0.7).abs() < 1e-3);

        // Grid over the 1-simplex with step 1e-4.
        let obj = |a: f64| -> f64 { rows.iter().map(|&t| (y[t] - a * x1[t] - (1.0 - a) * x2[t]).powi(2)).sum() };
        let (best_a, best_f) = (0..=10_000)
            .map(|i| i as f64 * 1e-4)
            .map(|a| (a, obj(a)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!((w.omega[0] - best_a).abs() < 1e-3);
        assert!(w.objective <= best_f + 1e-9);
    }

    #[test]
    fn trace_is_non_increasing_and_beats_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let n = rng.gen_range(2..6);
            let controls: Vec<Vec<f64>> = (0..n).map(|_| (0..25).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
            let y: Vec<f64> = (0..25).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let p = panel_from(y, controls);
            let rows: Vec<usize> = (0..24).collect();
            let w = fit_scm(&p, &rows, &ScmOptions::default()).unwrap();
            assert!(w.trace.windows(2).all(|p| p[1] <= p[0]));
            assert!(w.objective <= w.trace[0]);
            assert!(w.omega.iter().all(|v| *v >= 0.0));
            assert!((w.omega.iter().sum::<f64>() - 1.0).abs() < 1e-8);
            let again = fit_scm(&p, &rows, &ScmOptions::default()).unwrap();
            assert_eq!(again, w);
        }
    }

    #[test]
    fn non_finite_data_is_error() {
        let x = vec![vec![1.0, f64::NAN]];
        assert!(fit_scm_on(&x, &[1.0], &ScmOptions::default()).is_err());
    }
}
