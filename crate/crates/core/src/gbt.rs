//! Gradient-boosted regression trees under squared loss.
//!
//! The model starts from the training mean and adds `n_rounds` depth-bounded
//! trees, each fit to the current residuals and shrunk by the learning rate.
//! Like [`fit_tree`](crate::tree::fit_tree), fitting takes a count-weighted
//! multiset so boosted models can serve as members of subsampled ensembles.

use crate::data::{Dataset, SeedSpec};
use crate::error::{Error, Result};
use crate::tree::{fit_tree_on, Depth, FeatureSubset, RegressionTree, TreeConfig};

#[derive(Debug, Clone, Copy)]
pub struct GbtConfig {
    pub n_rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig { n_rounds: 100, max_depth: 6, learning_rate: 0.3, min_samples_leaf: 1 }
    }
}

impl GbtConfig {
    fn validate(&self) -> Result<()> {
        if self.n_rounds == 0 {
            return Err(Error::InvalidArgument("n_rounds must be >= 1".into()));
        }
        if self.max_depth == 0 {
            return Err(Error::InvalidArgument("max_depth must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::InvalidArgument("min_samples_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GbtModel {
    base_score: f64,
    learning_rate: f64,
    trees: Vec<RegressionTree>,
}

impl GbtModel {
    pub fn base_score(&self) -> f64 {
        self.base_score
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn trees(&self) -> &[RegressionTree] {
        &self.trees
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base_score
            + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub(crate) fn predict_row(&self, data: &Dataset, row: usize) -> f64 {
        self.base_score
            + self.learning_rate
                * self.trees.iter().map(|t| t.predict_row(data, row)).sum::<f64>()
    }
}

/// Fit a boosted model to the full training sample.
pub fn fit_gbt(data: &Dataset, cfg: &GbtConfig, seed: SeedSpec) -> Result<GbtModel> {
    fit_gbt_weighted(data, &vec![1; data.n()], cfg, seed)
}

/// Fit a boosted model to a count-weighted multiset of training rows.
pub fn fit_gbt_weighted(
    data: &Dataset,
    counts: &[u32],
    cfg: &GbtConfig,
    seed: SeedSpec,
) -> Result<GbtModel> {
    cfg.validate()?;
    if counts.len() != data.n() {
        return Err(Error::Dimension(format!(
            "{} rows vs {} counts",
            data.n(),
            counts.len()
        )));
    }
    let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
    if total == 0 {
        return Err(Error::Empty("row multiset"));
    }

    let base_score = (0..data.n())
        .map(|i| f64::from(counts[i]) * data.y()[i])
        .sum::<f64>()
        / total as f64;

    let tree_cfg = TreeConfig {
        max_depth: Depth::Max(cfg.max_depth),
        min_samples_leaf: cfg.min_samples_leaf,
        features_per_split: FeatureSubset::All,
    };
    let mut residuals: Vec<f64> = data.y().iter().map(|&y| y - base_score).collect();
    let mut trees = Vec::with_capacity(cfg.n_rounds);
    for round in 0..cfg.n_rounds {
        let tree = fit_tree_on(data.x(), &residuals, counts, &tree_cfg, seed.child(round as u64))?;
        for (i, r) in residuals.iter_mut().enumerate() {
            if counts[i] > 0 {
                *r -= cfg.learning_rate * tree.predict_row(data, i);
            }
        }
        trees.push(tree);
    }
    Ok(GbtModel { base_score, learning_rate: cfg.learning_rate, trees })
}
