//! Synthetic panels with a known regression function and injected effect.
//!
//! Controls follow stationary AR(1) processes with bounded uniform
//! innovations, optionally loaded on a shared AR(1) factor. The untreated
//! outcome is `f(X_t) + e_t` with bounded noise, and the treated outcome adds
//! a constant effect after the onset.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::panel::Panel;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dgp {
    /// `f(x) = sum_i beta_i x_i` over the first `beta.len()` controls.
    Linear { beta: Vec<f64> },
    /// `f(x) = b1 x1 + b2 x2 + b3 x1 x2`.
    Interaction { beta: [f64; 3] },
}

impl Dgp {
    pub fn required_controls(&self) -> usize {
        match self {
            Dgp::Linear { beta } => beta.len(),
            Dgp::Interaction { .. } => 2,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Dgp::Linear { beta } => beta.iter().zip(x).map(|(b, v)| b * v).sum(),
            Dgp::Interaction { beta } => beta[0] * x[0] + beta[1] * x[1] + beta[2] * x[0] * x[1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dgp: Dgp,
    pub n_controls: usize,
    pub t0: usize,
    pub t_post: usize,
    /// Constant effect added to the treated unit after the onset.
    pub tau: f64,
    /// AR(1) coefficient of each control's idiosyncratic part.
    pub ar_coef: f64,
    /// Half-width of the uniform control innovations.
    pub innovation: f64,
    /// Loading of every control on a shared AR(1) factor.
    pub factor_loading: f64,
    /// Stationary mean of each control.
    pub control_mean: f64,
    /// Half-width of the uniform outcome noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dgp: Dgp::Interaction { beta: [1.0, 1.0, 0.5] },
            n_controls: 4,
            t0: 100,
            t_post: 50,
            tau: 10.0,
            ar_coef: 0.5,
            innovation: 1.0,
            factor_loading: 0.0,
            control_mean: 3.0,
            noise: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub panel: Panel,
    /// `f(X_t)` for every period.
    pub f_values: Vec<f64>,
    /// Untreated outcome for every period.
    pub y0: Vec<f64>,
    /// Injected effect per period (zero before the onset).
    pub tau: Vec<f64>,
}

const BURN_IN: usize = 100;

/// Draws `t` periods of `n` AR(1) controls.
pub fn simulate_controls<R: Rng + ?Sized>(cfg: &SimConfig, t: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let h = cfg.innovation;
    let draw = |rng: &mut R| if h > 0.0 { rng.gen_range(-h..h) } else { 0.0 };
    let mut factor = 0.0;
    let mut idio = vec![0.0; cfg.n_controls];
    let mut cols = vec![Vec::with_capacity(t); cfg.n_controls];
    for step in 0..(BURN_IN + t) {
        factor = cfg.ar_coef * factor + draw(rng);
        for (i, e) in idio.iter_mut().enumerate() {
            *e = cfg.ar_coef * *e + draw(rng);
            if step >= BURN_IN {
                cols[i].push(cfg.control_mean + cfg.factor_loading * factor + *e);
            }
        }
    }
    cols
}

pub fn simulate(cfg: &SimConfig) -> Result<SimulatedPanel> {
    if cfg.n_controls < cfg.dgp.required_controls() || cfg.n_controls == 0 {
        return Err(invalid(format!(
            "DGP needs {} controls, config has {}",
            cfg.dgp.required_controls(),
            cfg.n_controls
        )));
    }
    if cfg.t0 == 0 || cfg.t_post == 0 {
        return Err(invalid("need at least one pre and one post period"));
    }
    if cfg.ar_coef.is_nan() || cfg.ar_coef.abs() >= 1.0 {
        return Err(invalid("AR coefficient must lie in (-1, 1)"));
    }
    let t = cfg.t0 + cfg.t_post;
    let mut rng = rng::stream(cfg.seed, rng::domain::SIMULATION, 0);
    let controls = simulate_controls(cfg, t, &mut rng);
    let f_values: Vec<f64> = (0..t)
        .map(|s| cfg.dgp.eval(&controls.iter().map(|c| c[s]).collect::<Vec<_>>()))
        .collect();
    let y0: Vec<f64> = f_values
        .iter()
        .map(|f| f + if cfg.noise > 0.0 { rng.gen_range(-cfg.noise..cfg.noise) } else { 0.0 })
        .collect();
    let tau: Vec<f64> = (0..t).map(|s| if s < cfg.t0 { 0.0 } else { cfg.tau }).collect();
    let y: Vec<f64> = y0.iter().zip(&tau).map(|(a, b)| a + b).collect();
    Ok(SimulatedPanel {
        panel: Panel::from_columns(y, controls, cfg.t0)?,
        f_values,
        y0,
        tau,
    })
}
