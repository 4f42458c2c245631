//! Regression trees fit by greedy variance reduction over a count-weighted
//! multiset of training rows.
//!
//! Trees are the members of subsampled ensembles, so fitting takes the
//! multiset as a per-row count vector rather than materialized duplicates:
//! doubling every count yields the identical tree. Split selection is fully
//! deterministic: candidate thresholds are midpoints between consecutive
//! distinct sorted values, and ties in gain go to the lowest feature index,
//! then the lowest threshold.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand_chacha::ChaCha12Rng;

use crate::data::{Dataset, SeedSpec};
use crate::error::{Error, Result};

/// Depth limit for a tree; `Full` grows until nodes are pure or cannot split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Full,
    Max(usize),
}

impl Depth {
    fn allows_split(self, depth: usize) -> bool {
        match self {
            Depth::Full => true,
            Depth::Max(limit) => depth < limit,
        }
    }
}

/// How many features are considered at each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSubset {
    All,
    Count(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct TreeConfig {
    pub max_depth: Depth,
    /// Minimum multiset weight on each side of a split.
    pub min_samples_leaf: u64,
    pub features_per_split: FeatureSubset,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: Depth::Full,
            min_samples_leaf: 1,
            features_per_split: FeatureSubset::All,
        }
    }
}

impl TreeConfig {
    fn validate(&self, dim: usize) -> Result<()> {
        if self.min_samples_leaf == 0 {
            return Err(Error::InvalidArgument("min_samples_leaf must be >= 1".into()));
        }
        if let Depth::Max(0) = self.max_depth {
            return Err(Error::InvalidArgument("max_depth must be >= 1".into()));
        }
        if let FeatureSubset::Count(s) = self.features_per_split {
            if s == 0 || s > dim {
                return Err(Error::InvalidArgument(format!(
                    "features_per_split {s} outside 1..={dim}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64 },
}

/// A fitted regression tree. Nodes are stored in one array with the root at
/// index 0; leaf identity is the node index, which is stable for a given
/// tree.
#[derive(Debug, Clone)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    fn descend(&self, mut coord: impl FnMut(usize) -> f64) -> usize {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Split { feature, threshold, left, right } => {
                    // Route left iff x[feature] <= threshold.
                    at = if coord(*feature) <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Index of the leaf the point falls into.
    pub fn leaf_id(&self, x: &[f64]) -> usize {
        self.descend(|f| x[f])
    }

    pub(crate) fn leaf_id_row(&self, data: &Dataset, row: usize) -> usize {
        self.descend(|f| data.xv(row, f))
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_id(x)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!("descend stops at leaves"),
        }
    }

    pub(crate) fn predict_row(&self, data: &Dataset, row: usize) -> f64 {
        match self.nodes[self.leaf_id_row(data, row)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!("descend stops at leaves"),
        }
    }
}

/// Fit a tree to the multiset of rows of `data` given by `counts`
/// (`counts[i]` copies of row `i`).
pub fn fit_tree(
    data: &Dataset,
    counts: &[u32],
    cfg: &TreeConfig,
    seed: SeedSpec,
) -> Result<RegressionTree> {
    let y: Vec<f64> = data.y().iter().copied().collect();
    fit_tree_on(data.x(), &y, counts, cfg, seed)
}

/// Fit against an explicit response vector (boosting fits trees to residuals
/// that are not part of any `Dataset`).
pub(crate) fn fit_tree_on(
    x: &DMatrix<f64>,
    y: &[f64],
    counts: &[u32],
    cfg: &TreeConfig,
    seed: SeedSpec,
) -> Result<RegressionTree> {
    if counts.len() != x.nrows() || y.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "{} rows vs {} counts and {} responses",
            x.nrows(),
            counts.len(),
            y.len()
        )));
    }
    cfg.validate(x.ncols())?;
    let rows: Vec<usize> = (0..x.nrows()).filter(|&i| counts[i] > 0).collect();
    if rows.is_empty() {
        return Err(Error::Empty("row multiset"));
    }
    let mut grower = Grower {
        x,
        y,
        counts,
        cfg,
        rng: seed.rng(),
        nodes: Vec::new(),
        rows,
        scratch: Vec::new(),
        part: Vec::new(),
    };
    let end = grower.rows.len();
    grower.grow(0, end, 0);
    Ok(RegressionTree { nodes: grower.nodes })
}

struct Grower<'a> {
    x: &'a DMatrix<f64>,
    y: &'a [f64],
    counts: &'a [u32],
    cfg: &'a TreeConfig,
    rng: ChaCha12Rng,
    nodes: Vec<Node>,
    /// Distinct row indices, partitioned in place as the tree grows.
    rows: Vec<usize>,
    scratch: Vec<(f64, usize)>,
    part: Vec<usize>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Grower<'_> {
    /// Build the subtree over `rows[lo..hi]`; returns its node index.
    fn grow(&mut self, lo: usize, hi: usize, depth: usize) -> usize {
        let mut w = 0u64;
        let mut wy = 0.0;
        for &r in &self.rows[lo..hi] {
            w += u64::from(self.counts[r]);
            wy += f64::from(self.counts[r]) * self.y[r];
        }
        let mean = wy / w as f64;

        let first_y = self.y[self.rows[lo]];
        let pure = self.rows[lo..hi].iter().all(|&r| self.y[r] == first_y);
        let can_split = self.cfg.max_depth.allows_split(depth)
            && hi - lo > 1
            && w >= 2 * self.cfg.min_samples_leaf
            && !pure;

        let best = if can_split { self.best_split(lo, hi, w, wy) } else { None };
        match best {
            None => {
                self.nodes.push(Node::Leaf { value: if pure { first_y } else { mean } });
                self.nodes.len() - 1
            }
            Some(split) => {
                // Reserve the split node so the root stays at index 0, then
                // partition rows around the threshold preserving order.
                let at = self.nodes.len();
                self.nodes.push(Node::Split {
                    feature: split.feature,
                    threshold: split.threshold,
                    left: usize::MAX,
                    right: usize::MAX,
                });
                let mid = self.partition(lo, hi, split.feature, split.threshold);
                let left = self.grow(lo, mid, depth + 1);
                let right = self.grow(mid, hi, depth + 1);
                self.nodes[at] = Node::Split {
                    feature: split.feature,
                    threshold: split.threshold,
                    left,
                    right,
                };
                at
            }
        }
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        match self.cfg.features_per_split {
            FeatureSubset::All => (0..self.x.ncols()).collect(),
            FeatureSubset::Count(s) => {
                let mut picked = sample(&mut self.rng, self.x.ncols(), s).into_vec();
                picked.sort_unstable();
                picked
            }
        }
    }

    fn best_split(&mut self, lo: usize, hi: usize, w: u64, wy: f64) -> Option<BestSplit> {
        let min_leaf = self.cfg.min_samples_leaf;
        let parent_score = wy * wy / w as f64;
        let mut best: Option<BestSplit> = None;
        for feature in self.candidate_features() {
            self.scratch.clear();
            self.scratch
                .extend(self.rows[lo..hi].iter().map(|&r| (self.x[(r, feature)], r)));
            self.scratch
                .sort_unstable_by(|a, b| a.partial_cmp(b).expect("covariates are finite"));

            let mut wl = 0u64;
            let mut wyl = 0.0;
            for t in 0..self.scratch.len() - 1 {
                let (v, r) = self.scratch[t];
                wl += u64::from(self.counts[r]);
                wyl += f64::from(self.counts[r]) * self.y[r];
                let next = self.scratch[t + 1].0;
                if v == next {
                    continue;
                }
                let wr = w - wl;
                if wl < min_leaf || wr < min_leaf {
                    continue;
                }
                let wyr = wy - wyl;
                let gain = wyl * wyl / wl as f64 + wyr * wyr / wr as f64 - parent_score;
                // Strict improvement keeps the first candidate on ties, which
                // is the lowest feature index, then the lowest threshold.
                if gain > best.as_ref().map_or(0.0, |b| b.gain) {
                    best = Some(BestSplit { gain, feature, threshold: 0.5 * (v + next) });
                }
            }
        }
        best
    }

    /// Stable in-place partition of `rows[lo..hi]`; returns the boundary.
    fn partition(&mut self, lo: usize, hi: usize, feature: usize, threshold: f64) -> usize {
        self.part.clear();
        self.part.extend(
            self.rows[lo..hi].iter().copied().filter(|&r| self.x[(r, feature)] <= threshold),
        );
        let n_left = self.part.len();
        self.part.extend(
            self.rows[lo..hi].iter().copied().filter(|&r| self.x[(r, feature)] > threshold),
        );
        self.rows[lo..hi].copy_from_slice(&self.part);
        lo + n_left
    }
}
