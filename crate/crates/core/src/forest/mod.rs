//! Constrained regression forests for counterfactual imputation.
//!
//! Each tree obeys four rules: leaves hold fewer than `m_leaf` observations,
//! no leaf holds fewer than `k`, each child keeps at least an `alpha` share of
//! its parent, and every control direction has a positive chance of being
//! considered at each node (`mtry` directions are drawn uniformly without
//! replacement). The forest prediction is the plain average of its trees.

mod importance;
mod tree;

use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use importance::permutation_importance;
pub use tree::{best_split, fit_tree, min_child_size, SplitChoice, TrainingData, TreeNode};

use crate::error::{invalid, Error, Result};
use crate::panel::{split_range, Panel, SplitSpec};
use crate::rng;
use crate::stats;

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Resampling applied to the training rows of each tree.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Bagging {
    /// Every tree sees all rows; trees differ only through direction sampling.
    #[default]
    None,
    /// Circular moving-block bootstrap of the (time-ordered) rows.
    BlockBootstrap { block_length: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    /// Minimum child share of the parent's observations, in (0, 0.5).
    pub alpha: f64,
    /// Minimum leaf size.
    pub k: usize,
    /// Strict upper bound on leaf size. `None` splits every node that admits
    /// a split.
    pub m_leaf: Option<usize>,
    /// Directions sampled per node. `None` means `round(sqrt(N))`.
    pub mtry: Option<usize>,
    pub n_trees: usize,
    pub seed: u64,
    pub bagging: Bagging,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            k: 5,
            m_leaf: None,
            mtry: None,
            n_trees: 500,
            seed: 0,
            bagging: Bagging::None,
        }
    }
}

impl ForestConfig {
    pub fn resolved_mtry(&self, n_features: usize) -> usize {
        self.mtry.unwrap_or_else(|| default_mtry(n_features))
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(invalid(format!("alpha = {} must lie in (0, 0.5)", self.alpha)));
        }
        if self.k == 0 {
            return Err(invalid("k must be positive"));
        }
        if let Some(m) = self.m_leaf {
            if m < 2 * self.k {
                return Err(invalid(format!("m_leaf = {m} must be at least 2k = {}", 2 * self.k)));
            }
        }
        let mtry = self.resolved_mtry(n_features);
        if mtry == 0 || mtry > n_features {
            return Err(invalid(format!("mtry = {mtry} outside 1..={n_features}")));
        }
        if self.n_trees == 0 {
            return Err(invalid("n_trees must be positive"));
        }
        if let Bagging::BlockBootstrap { block_length } = self.bagging {
            if block_length == 0 {
                return Err(invalid("bootstrap block length must be positive"));
            }
        }
        Ok(())
    }
}

/// `round(sqrt(N))`, at least 1.
pub fn default_mtry(n_features: usize) -> usize {
    ((n_features as f64).sqrt().round() as usize).clamp(1, n_features.max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub format_version: u32,
    /// Config with `mtry` resolved.
    pub config: ForestConfig,
    pub n_features: usize,
    /// Smallest half-open period range containing all training rows.
    pub training_range: Range<usize>,
    pub trees: Vec<TreeNode>,
}

impl ForestModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        stats::sum(self.trees.iter().map(|t| t.predict(x))) / self.trees.len() as f64
    }

    pub fn predict_rows(&self, panel: &Panel, rows: Range<usize>) -> Vec<f64> {
        rows.into_par_iter()
            .map(|t| self.predict(&panel.x_row(t)))
            .collect()
    }

    /// Directions used by at least one split in any tree.
    pub fn used_directions(&self) -> Vec<bool> {
        let mut used = vec![false; self.n_features];
        for t in &self.trees {
            t.collect_directions(&mut used);
        }
        used
    }

    /// Structural checks on every tree; with `data`, also checks routing and
    /// that oversize leaves admit no split.
    pub fn check_invariants(&self, data: Option<TrainingData<'_>>) -> Result<()> {
        self.config.validate(self.n_features)?;
        if self.trees.len() != self.config.n_trees {
            return Err(Error::InvalidModel(format!(
                "{} trees stored, config says {}",
                self.trees.len(),
                self.config.n_trees
            )));
        }
        for tree in &self.trees {
            tree.check_invariants(&self.config, self.n_features, data)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and validates a serialized model.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        de.disable_recursion_limit();
        let model: ForestModel = serde::Deserialize::deserialize(&mut de)?;
        de.end()?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidModel(format!(
                "unsupported model format version {}",
                model.format_version
            )));
        }
        model.check_invariants(None)?;
        Ok(model)
    }
}

/// Circular block bootstrap of `rows`: `ceil(n / L)` blocks with uniform
/// start positions, concatenated and truncated to `n`.
pub fn block_resample<R: Rng + ?Sized>(rows: &[usize], block_length: usize, rng: &mut R) -> Vec<usize> {
    let n = rows.len();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let start = rng.gen_range(0..n);
        for j in 0..block_length {
            if out.len() == n {
                break;
            }
            out.push(rows[(start + j) % n]);
        }
    }
    out
}

/// Fits `n_trees` trees on the given data. Tree `b` draws from stream `b` of
/// the configured seed, so the result does not depend on thread count.
pub fn fit_forest_on(data: TrainingData<'_>, rows: &[usize], config: &ForestConfig) -> Result<ForestModel> {
    let n_features = data.n_features();
    config.validate(n_features)?;
    if rows.len() < config.k {
        return Err(invalid(format!(
            "{} training rows is fewer than the minimum leaf size k = {}",
            rows.len(),
            config.k
        )));
    }
    let mut resolved = config.clone();
    resolved.mtry = Some(config.resolved_mtry(n_features));

    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(config.seed, rng::domain::TREE, b as u64);
            match config.bagging {
                Bagging::None => fit_tree(data, rows, &resolved, &mut rng),
                Bagging::BlockBootstrap { block_length } => {
                    let sample = block_resample(rows, block_length, &mut rng);
                    fit_tree(data, &sample, &resolved, &mut rng)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let lo = rows.iter().copied().min().unwrap_or(0);
    let hi = rows.iter().copied().max().map_or(0, |m| m + 1);
    Ok(ForestModel {
        format_version: MODEL_FORMAT_VERSION,
        config: resolved,
        n_features,
        training_range: lo..hi,
        trees,
    })
}

/// Fits a forest of the panel's treated outcome on its controls over `rows`.
pub fn fit_forest(panel: &Panel, rows: &[usize], config: &ForestConfig) -> Result<ForestModel> {
    if let Some(&bad) = rows.iter().find(|&&t| t >= panel.t()) {
        return Err(invalid(format!("row {bad} outside panel of length {}", panel.t())));
    }
    let data = TrainingData {
        columns: panel.controls(),
        y: panel.treated(),
    };
    fit_forest_on(data, rows, config)
}

/// Root-mean-squared prediction error of `model` on the panel rows.
pub fn rmspe_on(model: &ForestModel, panel: &Panel, rows: Range<usize>) -> f64 {
    let preds = model.predict_rows(panel, rows.clone());
    let errors: Vec<f64> = rows.zip(preds).map(|(t, p)| panel.treated()[t] - p).collect();
    stats::rmse(&errors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtryTuning {
    pub config: ForestConfig,
    /// `(mtry, validation RMSPE)` per grid value; empty for a singleton grid.
    pub scores: Vec<(usize, f64)>,
}

/// Picks `mtry` by validation RMSPE on the temporal split of the
/// pre-treatment block. Ties go to the smaller value.
pub fn tune_mtry(panel: &Panel, split: SplitSpec, base: &ForestConfig, grid: &[usize]) -> Result<MtryTuning> {
    let n = panel.n();
    if grid.is_empty() {
        return Err(invalid("mtry grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|&&m| m == 0 || m > n) {
        return Err(invalid(format!("mtry {bad} outside 1..={n}")));
    }
    if grid.len() == 1 {
        return Ok(MtryTuning {
            config: ForestConfig {
                mtry: Some(grid[0]),
                ..base.clone()
            },
            scores: Vec::new(),
        });
    }
    let (est, val) = split_range(panel.t0(), split)?;
    let rows: Vec<usize> = est.collect();
    let mut sorted_grid = grid.to_vec();
    sorted_grid.sort_unstable();
    sorted_grid.dedup();

    let mut scores = Vec::with_capacity(sorted_grid.len());
    for &m in &sorted_grid {
        let cfg = ForestConfig {
            mtry: Some(m),
            ..base.clone()
        };
        let model = fit_forest(panel, &rows, &cfg)?;
        scores.push((m, rmspe_on(&model, panel, val.clone())));
    }
    let (best, _) = scores
        .iter()
        .copied()
        .fold(None::<(usize, f64)>, |acc, (m, s)| match acc {
            Some((_, bs)) if bs <= s => acc,
            _ => Some((m, s)),
        })
        .expect("non-empty grid");
    Ok(MtryTuning {
        config: ForestConfig {
            mtry: Some(best),
            ..base.clone()
        },
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_panel(t: usize, n: usize, seed: u64) -> Panel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let controls: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..t).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let treated = (0..t)
            .map(|s| controls[0][s] + 0.5 * controls[n - 1][s] * controls[0][s] + 0.1 * normal.sample(&mut rng))
            .collect();
        Panel::from_columns(treated, controls, t - 5).unwrap()
    }

    fn quick(n_trees: usize) -> ForestConfig {
        ForestConfig {
            n_trees,
            k: 3,
            ..Default::default()
        }
    }

    #[test]
    fn single_tree_forest_equals_tree() {
        let p = random_panel(60, 4, 1);
        let rows: Vec<usize> = p.pre_range().collect();
        let cfg = quick(1);
        let model = fit_forest(&p, &rows, &cfg).unwrap();
        let mut rng = rng::stream(cfg.seed, rng::domain::TREE, 0);
        let mut resolved = cfg.clone();
        resolved.mtry = Some(default_mtry(4));
        let data = TrainingData { columns: p.controls(), y: p.treated() };
        let tree = fit_tree(data, &rows, &resolved, &mut rng).unwrap();
        for t in 0..p.t() {
            let x = p.x_row(t);
            assert_eq!(model.predict(&x), tree.predict(&x));
        }
    }

    #[test]
    fn constant_outcome_predicts_constant() {
        let p = random_panel(40, 3, 2);
        let p = p.with_treated(vec![4.25; 40]).unwrap();
        let rows: Vec<usize> = p.pre_range().collect();
        let model = fit_forest(&p, &rows, &quick(10)).unwrap();
        for t in 0..p.t() {
            assert_eq!(model.predict(&p.x_row(t)), 4.25);
        }
        assert_eq!(model.predict(&[1e9, -1e9, 0.0]), 4.25);
    }

    #[test]
    fn full_mtry_without_bagging_gives_identical_trees() {
        let p = random_panel(80, 3, 3);
        let rows: Vec<usize> = p.pre_range().collect();
        let cfg = ForestConfig { mtry: Some(3), ..quick(5) };
        let model = fit_forest(&p, &rows, &cfg).unwrap();
        for t in &model.trees[1..] {
            assert_eq!(t, &model.trees[0]);
        }
        let x = p.x_row(77);
        assert_eq!(model.predict(&x), model.trees[0].predict(&x));
    }

    #[test]
    fn predictions_stay_in_training_range() {
        let p = random_panel(70, 3, 4);
        let rows: Vec<usize> = p.pre_range().collect();
        let model = fit_forest(&p, &rows, &quick(20)).unwrap();
        let (lo, hi) = rows.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &t| {
            (lo.min(p.treated()[t]), hi.max(p.treated()[t]))
        });
        for x in [[100.0, 100.0, 100.0], [-100.0, 0.0, 100.0], [0.0, 0.0, 0.0]] {
            let y = model.predict(&x);
            assert!(y >= lo && y <= hi);
        }
    }

    #[test]
    fn thread_count_does_not_change_fit() {
        let p = random_panel(90, 5, 5);
        let rows: Vec<usize> = p.pre_range().collect();
        let cfg = ForestConfig {
            bagging: Bagging::BlockBootstrap { block_length: 3 },
            ..quick(16)
        };
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = one.install(|| fit_forest(&p, &rows, &cfg).unwrap());
        let b = fit_forest(&p, &rows, &cfg).unwrap();
        assert_eq!(a, b);
        a.check_invariants(Some(TrainingData { columns: p.controls(), y: p.treated() }))
            .unwrap();
    }

    #[test]
    fn json_round_trip_and_validation() {
        let p = random_panel(50, 3, 6);
        let rows: Vec<usize> = p.pre_range().collect();
        let model = fit_forest(&p, &rows, &ForestConfig { m_leaf: Some(8), ..quick(3) }).unwrap();
        let text = model.to_json().unwrap();
        assert_eq!(ForestModel::from_json(&text).unwrap(), model);

        let mut broken = model.clone();
        broken.config.k = 1000;
        assert!(ForestModel::from_json(&broken.to_json().unwrap()).is_err());
        let mut wrong_version = model;
        wrong_version.format_version = 99;
        assert!(ForestModel::from_json(&wrong_version.to_json().unwrap()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ForestConfig { alpha: 0.5, ..Default::default() }.validate(4).is_err());
        assert!(ForestConfig { k: 3, m_leaf: Some(5), ..Default::default() }.validate(4).is_err());
        assert!(ForestConfig { mtry: Some(5), ..Default::default() }.validate(4).is_err());
        assert!(ForestConfig::default().validate(4).is_ok());
        assert_eq!(default_mtry(11), 3);
        assert_eq!(default_mtry(1), 1);
    }

    #[test]
    fn singleton_grid_skips_scoring() {
        let p = random_panel(40, 4, 7);
        let tuned = tune_mtry(&p, SplitSpec::default(), &quick(5), &[3]).unwrap();
        assert_eq!(tuned.config.mtry, Some(3));
        assert!(tuned.scores.is_empty());
        assert!(tune_mtry(&p, SplitSpec::default(), &quick(5), &[]).is_err());
        assert!(tune_mtry(&p, SplitSpec::default(), &quick(5), &[5]).is_err());
    }

    #[test]
    fn block_resample_keeps_length_and_contiguity() {
        let rows: Vec<usize> = (10..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = block_resample(&rows, 3, &mut rng);
        assert_eq!(s.len(), 10);
        for chunk in s.chunks(3) {
            for w in chunk.windows(2) {
                assert_eq!((w[0] - 10 + 1) % 10, w[1] - 10);
            }
        }
    }
}
