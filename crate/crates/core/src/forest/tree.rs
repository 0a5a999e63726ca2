//! Single regression tree under the leaf-size and balance constraints.
//!
//! A node with `n` observations is split only if `n >= m_leaf` (or always,
//! when no upper bound is set) and an admissible split exists: both children
//! must hold at least `max(k, ceil(alpha * n))` observations. Among the
//! admissible splits of the sampled directions the one with the smallest
//! within-children sum of squared deviations wins. Observations go left iff
//! `x[direction] <= threshold`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ForestConfig;
use crate::error::{invalid, Error, Result};
use crate::stats;

/// Column-major view of training data: `columns[i][t]` is control `i` at
/// period `t`, `y[t]` the treated outcome.
#[derive(Debug, Clone, Copy)]
pub struct TrainingData<'a> {
    pub columns: &'a [Vec<f64>],
    pub y: &'a [f64],
}

impl TrainingData<'_> {
    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[t]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        direction: usize,
        threshold: f64,
        /// Observations reaching this node.
        count: usize,
        /// Sum of squared deviations within the two children.
        sse: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        /// Training periods in the leaf, with bootstrap multiplicity.
        members: Vec<usize>,
        value: f64,
        /// True when the node stopped because no admissible split existed,
        /// false when it was already below the leaf-size bound.
        exhausted: bool,
    },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.leaf_for(x).0
    }

    /// Value and member set of the leaf that `x` is routed to.
    pub fn leaf_for(&self, x: &[f64]) -> (f64, &[usize]) {
        let mut node = self;
        loop {
            match node {
                TreeNode::Split {
                    direction,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    node = if x[*direction] <= *threshold { left } else { right };
                }
                TreeNode::Leaf { members, value, .. } => return (*value, members),
            }
        }
    }

    pub fn count(&self) -> usize {
        match self {
            TreeNode::Split { count, .. } => *count,
            TreeNode::Leaf { members, .. } => members.len(),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
            TreeNode::Leaf { .. } => 1,
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
            TreeNode::Leaf { .. } => 0,
        }
    }

    /// Marks every direction used by some split.
    pub fn collect_directions(&self, used: &mut [bool]) {
        if let TreeNode::Split {
            direction,
            left,
            right,
            ..
        } = self
        {
            used[*direction] = true;
            left.collect_directions(used);
            right.collect_directions(used);
        }
    }

    /// Traverses the tree and checks the structural rules: leaf sizes,
    /// child balance, count bookkeeping and (with `data`) that every member
    /// routes to its own leaf and that oversize leaves are truly unsplittable.
    pub fn check_invariants(
        &self,
        config: &ForestConfig,
        n_features: usize,
        data: Option<TrainingData<'_>>,
    ) -> Result<()> {
        self.check_node(self, config, n_features, data).map(|_| ())
    }

    fn check_node(
        &self,
        root: &TreeNode,
        config: &ForestConfig,
        n_features: usize,
        data: Option<TrainingData<'_>>,
    ) -> Result<usize> {
        match self {
            TreeNode::Split {
                direction,
                threshold,
                count,
                sse,
                left,
                right,
            } => {
                if *direction >= n_features {
                    return Err(Error::InvalidModel(format!(
                        "split direction {direction} out of range for {n_features} features"
                    )));
                }
                if !threshold.is_finite() || !sse.is_finite() {
                    return Err(Error::InvalidModel("non-finite split".into()));
                }
                let l = left.check_node(root, config, n_features, data)?;
                let r = right.check_node(root, config, n_features, data)?;
                if l + r != *count {
                    return Err(Error::InvalidModel(format!(
                        "children hold {l} + {r} observations, parent {count}"
                    )));
                }
                let min_child = min_child_size(*count, config);
                if l < min_child || r < min_child {
                    return Err(Error::InvalidModel(format!(
                        "unbalanced split {l}/{r} of {count} (minimum child {min_child})"
                    )));
                }
                if let Some(m) = config.m_leaf {
                    if *count < m {
                        return Err(Error::InvalidModel(format!(
                            "node of size {count} < m_leaf = {m} was split"
                        )));
                    }
                }
                Ok(*count)
            }
            TreeNode::Leaf {
                members,
                value,
                exhausted,
            } => {
                let n = members.len();
                if n < config.k {
                    return Err(Error::InvalidModel(format!(
                        "leaf with {n} observations below k = {}",
                        config.k
                    )));
                }
                if !value.is_finite() {
                    return Err(Error::InvalidModel("non-finite leaf value".into()));
                }
                if let Some(m) = config.m_leaf {
                    if n >= m && !exhausted {
                        return Err(Error::InvalidModel(format!(
                            "leaf with {n} observations reaches m_leaf = {m}"
                        )));
                    }
                }
                if let Some(d) = data {
                    for &t in members {
                        let x = d.row(t);
                        if !std::ptr::eq(root.leaf_for(&x).1.as_ptr(), members.as_ptr()) {
                            return Err(Error::InvalidModel(format!(
                                "member period {t} does not route to its leaf"
                            )));
                        }
                    }
                    let mean = stats::mean(&members.iter().map(|&t| d.y[t]).collect::<Vec<_>>());
                    if (mean - value).abs() > 1e-9 * (1.0 + mean.abs()) {
                        return Err(Error::InvalidModel(format!(
                            "leaf value {value} differs from member mean {mean}"
                        )));
                    }
                    let size_allows_split = config.m_leaf.is_none_or(|m| n >= m);
                    if size_allows_split && !is_degenerate(d, members) {
                        let all: Vec<usize> = (0..d.n_features()).collect();
                        if best_split(d, members, &all, config).is_some() {
                            return Err(Error::InvalidModel(format!(
                                "leaf with {n} observations has an admissible split"
                            )));
                        }
                    }
                }
                Ok(n)
            }
        }
    }
}

/// Smallest admissible child: `max(k, ceil(alpha * n))`.
pub fn min_child_size(n: usize, config: &ForestConfig) -> usize {
    let balance = (config.alpha * n as f64).ceil() as usize;
    balance.max(config.k).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub direction: usize,
    pub threshold: f64,
    /// Number of observations sent left.
    pub left_count: usize,
    /// Within-children sum of squares, as computed by the search.
    pub score: f64,
}

/// Best admissible split of `rows` over `directions` (ascending order is
/// used for tie-breaking), or `None` if no direction admits one.
pub fn best_split(
    data: TrainingData<'_>,
    rows: &[usize],
    directions: &[usize],
    config: &ForestConfig,
) -> Option<SplitChoice> {
    let n = rows.len();
    let min_child = min_child_size(n, config);
    if 2 * min_child > n {
        return None;
    }
    let centre = stats::mean(&rows.iter().map(|&t| data.y[t]).collect::<Vec<_>>());
    let mut dirs = directions.to_vec();
    dirs.sort_unstable();

    let mut best: Option<SplitChoice> = None;
    let mut order = rows.to_vec();
    let mut ys = vec![0.0; n];
    for &d in &dirs {
        let col = &data.columns[d];
        order.copy_from_slice(rows);
        order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
        for (slot, &t) in ys.iter_mut().zip(&order) {
            *slot = data.y[t] - centre;
        }
        let total: f64 = ys.iter().sum();
        let total_sq: f64 = ys.iter().map(|v| v * v).sum();
        // Scores closer than this are ties; the earlier candidate is kept.
        let tie = 1e-10 * total_sq;
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        for i in 1..n {
            left_sum += ys[i - 1];
            left_sq += ys[i - 1] * ys[i - 1];
            if i < min_child || n - i < min_child {
                continue;
            }
            let lo = col[order[i - 1]];
            let hi = col[order[i]];
            if lo >= hi {
                continue;
            }
            let nl = i as f64;
            let nr = (n - i) as f64;
            let right_sum = total - left_sum;
            let right_sq = total_sq - left_sq;
            let score = (left_sq - left_sum * left_sum / nl) + (right_sq - right_sum * right_sum / nr);
            if best.is_none_or(|b| score < b.score - tie) {
                best = Some(SplitChoice {
                    direction: d,
                    threshold: midpoint(lo, hi),
                    left_count: i,
                    score,
                });
            }
        }
    }
    best
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi || mid < lo {
        lo
    } else {
        mid
    }
}

fn is_degenerate(data: TrainingData<'_>, rows: &[usize]) -> bool {
    let first = rows[0];
    let y_const = rows.iter().all(|&t| data.y[t] == data.y[first]);
    let x_const = data
        .columns
        .iter()
        .all(|c| rows.iter().all(|&t| c[t] == c[first]));
    y_const || x_const
}

fn sse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let v: Vec<f64> = values.collect();
    let m = stats::mean(&v);
    stats::sum(v.iter().map(|x| (x - m) * (x - m)))
}

/// Grows one tree on `rows` (periods, possibly repeated).
pub fn fit_tree<R: Rng + ?Sized>(
    data: TrainingData<'_>,
    rows: &[usize],
    config: &ForestConfig,
    rng: &mut R,
) -> Result<TreeNode> {
    if rows.len() < config.k {
        return Err(invalid(format!(
            "{} training rows is fewer than the minimum leaf size k = {}",
            rows.len(),
            config.k
        )));
    }
    let n_features = data.n_features();
    let mtry = config.resolved_mtry(n_features);
    if mtry == 0 || mtry > n_features {
        return Err(invalid(format!("mtry = {mtry} outside 1..={n_features}")));
    }
    Ok(grow(data, rows.to_vec(), config, mtry, rng))
}

fn grow<R: Rng + ?Sized>(
    data: TrainingData<'_>,
    rows: Vec<usize>,
    config: &ForestConfig,
    mtry: usize,
    rng: &mut R,
) -> TreeNode {
    let n = rows.len();
    let value = stats::mean(&rows.iter().map(|&t| data.y[t]).collect::<Vec<_>>());
    if config.m_leaf.is_some_and(|m| n < m) {
        return TreeNode::Leaf {
            members: rows,
            value,
            exhausted: false,
        };
    }
    let exhausted_leaf = |rows: Vec<usize>| TreeNode::Leaf {
        members: rows,
        value,
        exhausted: true,
    };
    if 2 * min_child_size(n, config) > n || is_degenerate(data, &rows) {
        return exhausted_leaf(rows);
    }

    let mut directions: Vec<usize> = (0..data.n_features()).collect();
    directions.shuffle(rng);
    let mut choice = best_split(data, &rows, &directions[..mtry], config);
    // None of the sampled directions admits a split: keep drawing.
    for &d in &directions[mtry..] {
        if choice.is_some() {
            break;
        }
        choice = best_split(data, &rows, &[d], config);
    }
    let Some(choice) = choice else {
        return exhausted_leaf(rows);
    };

    let col = &data.columns[choice.direction];
    let (left, right): (Vec<usize>, Vec<usize>) =
        rows.iter().partition(|&&t| col[t] <= choice.threshold);
    let sse = sse(left.iter().map(|&t| data.y[t])) + sse(right.iter().map(|&t| data.y[t]));
    TreeNode::Split {
        direction: choice.direction,
        threshold: choice.threshold,
        count: n,
        sse,
        left: Box::new(grow(data, left, config, mtry, rng)),
        right: Box::new(grow(data, right, config, mtry, rng)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::Bagging;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(alpha: f64, k: usize, m_leaf: Option<usize>) -> ForestConfig {
        ForestConfig {
            alpha,
            k,
            m_leaf,
            mtry: None,
            n_trees: 1,
            seed: 0,
            bagging: Bagging::None,
        }
    }

    #[test]
    fn identical_rows_give_single_leaf() {
        let columns = vec![vec![1.0; 6], vec![2.0; 6]];
        let y = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let data = TrainingData { columns: &columns, y: &y };
        let rows: Vec<usize> = (0..6).collect();
        let tree = fit_tree(data, &rows, &cfg(0.2, 1, Some(2)), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        match tree {
            TreeNode::Leaf { value, exhausted, .. } => {
                assert_eq!(value, 3.5);
                assert!(exhausted);
            }
            other => panic!("expected leaf, got {other:?}"),
        }
    }

    #[test]
    fn step_function_splits_between_two_and_three() {
        // Enumerated by hand: thresholds 1.5, 2.5, 3.5 give SSE 66.7, 0, 66.7.
        let columns = vec![vec![1.0, 2.0, 3.0, 4.0]];
        let y = vec![0.0, 0.0, 10.0, 10.0];
        let data = TrainingData { columns: &columns, y: &y };
        let tree = fit_tree(data, &[0, 1, 2, 3], &cfg(0.25, 1, Some(2)), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let TreeNode::Split { direction, threshold, sse, left, right, .. } = &tree else {
            panic!("expected split");
        };
        assert_eq!((*direction, *threshold, *sse), (0, 2.5, 0.0));
        assert_eq!(left.predict(&[0.0]), 0.0);
        assert_eq!(right.predict(&[9.0]), 10.0);
        tree.check_invariants(&cfg(0.25, 1, Some(2)), 1, Some(data)).unwrap();
    }

    #[test]
    fn too_few_rows_is_error() {
        let columns = vec![vec![1.0, 2.0]];
        let y = vec![0.0, 1.0];
        let data = TrainingData { columns: &columns, y: &y };
        assert!(fit_tree(data, &[0, 1], &cfg(0.2, 3, None), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn balance_rule_blocks_lopsided_split() {
        // Only the outlier split reduces SSE, but alpha = 0.4 of 5 demands 2 per child.
        let columns = vec![vec![1.0, 2.0, 3.0, 4.0, 5.0]];
        let y = vec![0.0, 0.0, 0.0, 0.0, 100.0];
        let data = TrainingData { columns: &columns, y: &y };
        let c = cfg(0.4, 1, Some(2));
        let tree = fit_tree(data, &[0, 1, 2, 3, 4], &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let TreeNode::Split { left, right, .. } = &tree else { panic!() };
        assert!(left.count() >= 2 && right.count() >= 2);
        tree.check_invariants(&c, 1, Some(data)).unwrap();
    }

    #[test]
    fn checker_rejects_tampered_tree() {
        let columns = vec![vec![1.0, 2.0, 3.0, 4.0]];
        let y = vec![0.0, 0.0, 10.0, 10.0];
        let data = TrainingData { columns: &columns, y: &y };
        let c = cfg(0.25, 1, Some(2));
        let leaf = TreeNode::Leaf { members: vec![0, 1, 2, 3], value: 5.0, exhausted: false };
        assert!(leaf.check_invariants(&c, 1, Some(data)).is_err());
        let lying = TreeNode::Leaf { members: vec![0, 1, 2, 3], value: 5.0, exhausted: true };
        assert!(lying.check_invariants(&c, 1, None).is_ok());
        assert!(lying.check_invariants(&c, 1, Some(data)).is_err());
    }
}
