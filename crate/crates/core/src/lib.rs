//! Infinitesimal jackknife (IJ) variance and covariance estimation for
//! regression models built from a common training sample.
//!
//! The IJ directional derivative of a fitted model `f` at a query point `x`
//! with respect to training observation `i` is
//!
//! ```text
//! U_i(x) = lim_{eps -> 0} [ f(P0 + eps*(delta_i - P0); x) - f(P0; x) ] / eps
//! ```
//!
//! where `P0` is the empirical distribution of the training sample and
//! `delta_i` the point mass at observation `i`. Every model family in this
//! crate exposes that derivative field, which makes variances, covariances
//! between different models fit on the same data, and covariances across
//! query points all take the same plug-in form `(1/n^2) * U^T U`.
//!
//! Model families:
//!
//! * [`ensemble`]: subsampled ensembles (random forests, boosted-tree
//!   ensembles) with the sampling-noise corrections needed at finite
//!   ensemble size, including the V-statistics ANOVA correction.
//! * [`mest`] / [`network`]: smooth M-estimators (least squares, one
//!   hidden layer networks) via score vectors and the mean Hessian.
//! * [`kernel`]: Nadaraya-Watson smoothers and a local bias modification
//!   for forests built from out-of-bag co-leaf weights.
//! * [`compare`]: covariance blocks between models, combined (boosted)
//!   predictions and intervals, and chi-square tests that two models have
//!   the same target.

pub mod compare;
pub mod data;
pub mod dist;
pub mod ensemble;
pub mod error;
pub mod gbt;
pub mod kernel;
pub mod mest;
pub mod network;
pub mod tree;

pub use compare::{
    combined_interval, compare_boost_stage, compare_fitted, compare_models,
    confidence_interval, cov_blocks,
    fit_boost, reproduction_interval, stage_test, ComparisonResult, CovBlocks, DerivativeField,
    PredictiveModel, TwoStageModel,
};
pub use data::{gen_dataset, gen_queries, Dataset, QuerySet, SeedSpec, SignalKind};
pub use dist::{chisq_cdf, chisq_quantile, normal_quantile};
pub use ensemble::{
    between_member_variance, fit_ensemble, raw_ij_derivatives, ranger_corrected_cov,
    vstat_corrected_cov, Ensemble, EnsembleConfig, InbagMatrix, MemberPredictions, Predictor,
};
pub use error::{Error, Result};
pub use gbt::{fit_gbt, fit_gbt_weighted, GbtConfig, GbtModel};
pub use kernel::{
    local_bias, local_bias_derivatives, modified_variance, nw_derivatives, nw_predict,
    oob_inleaf_weights, KernelFn, KernelSpec, LocalModifier, LocalWeights, NadarayaWatson,
    ResidualMode,
};
pub use mest::{fit_linear, FittedMEstimator, LeastSquares, MObjective};
pub use network::{fit_network, Activation, NetConfig, NetInit, OneHiddenLayer};
pub use tree::{fit_tree, Depth, FeatureSubset, Node, RegressionTree, TreeConfig};
