//! The model roster: parse a textual model spec, fit it, and expose
//! predictions with the matching IJ variance estimate.

use std::fmt;
use std::str::FromStr;

use anyhow::{anyhow, bail};
use ij_core::{
    fit_boost, fit_ensemble, fit_gbt_weighted, fit_linear, fit_network, fit_tree,
    raw_ij_derivatives, ranger_corrected_cov, vstat_corrected_cov, Activation, Dataset,
    Depth, DerivativeField, Ensemble, EnsembleConfig, Error, FittedMEstimator,
    GbtConfig, GbtModel, KernelFn, KernelSpec, LeastSquares, LocalModifier,
    NadarayaWatson, NetConfig, OneHiddenLayer, Predictor, PredictiveModel, QuerySet,
    RegressionTree, ResidualMode, SeedSpec, TreeConfig, TwoStageModel,
};

use crate::config::Correction;

/// A model recipe, as written on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    /// `lm`
    Linear,
    /// `rf:full` or `rf:<depth>`
    Forest { depth: Option<usize> },
    /// `xgb`: a subsampled ensemble of gradient-boosted trees
    Gbt,
    /// `nn:<hidden>:<activation>`
    Network { hidden: usize, activation: Activation },
    /// `nw:<kernel>:<bandwidth>`
    Kernel { kernel: KernelFn, bandwidth: f64 },
    /// `mod:rf:full` or `mod:rf:<depth>`: forest plus local bias correction
    Modified { depth: Option<usize> },
    /// `<base>+<boost>`: boost stage fit on the base stage's residuals
    Boosted { base: Box<ModelSpec>, boost: Box<ModelSpec> },
}

fn parse_depth(s: &str) -> anyhow::Result<Option<usize>> {
    if s == "full" {
        return Ok(None);
    }
    let d: usize = s.parse().map_err(|_| anyhow!("invalid tree depth {s:?}"))?;
    if d == 0 {
        bail!("tree depth must be positive");
    }
    Ok(Some(d))
}

fn parse_activation(s: &str) -> anyhow::Result<Activation> {
    match s {
        "sigmoid" => Ok(Activation::Sigmoid),
        "relu" => Ok(Activation::Relu),
        other => bail!("unknown activation {other:?}; expected sigmoid or relu"),
    }
}

fn parse_kernel(s: &str) -> anyhow::Result<KernelFn> {
    match s {
        "gaussian" => Ok(KernelFn::Gaussian),
        "uniform" => Ok(KernelFn::Uniform),
        other => bail!("unknown kernel {other:?}; expected gaussian or uniform"),
    }
}

fn parse_single(s: &str) -> anyhow::Result<ModelSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["lm"] => Ok(ModelSpec::Linear),
        ["rf"] | ["rf", "full"] => Ok(ModelSpec::Forest { depth: None }),
        ["rf", d] => Ok(ModelSpec::Forest { depth: parse_depth(d)? }),
        ["xgb"] => Ok(ModelSpec::Gbt),
        ["nn"] => Ok(ModelSpec::Network { hidden: 5, activation: Activation::Sigmoid }),
        ["nn", h] => Ok(ModelSpec::Network {
            hidden: h.parse().map_err(|_| anyhow!("invalid hidden units {h:?}"))?,
            activation: Activation::Sigmoid,
        }),
        ["nn", h, a] => Ok(ModelSpec::Network {
            hidden: h.parse().map_err(|_| anyhow!("invalid hidden units {h:?}"))?,
            activation: parse_activation(a)?,
        }),
        ["nw", k, bw] => {
            let bandwidth: f64 =
                bw.parse().map_err(|_| anyhow!("invalid bandwidth {bw:?}"))?;
            Ok(ModelSpec::Kernel { kernel: parse_kernel(k)?, bandwidth })
        }
        ["mod"] | ["mod", "rf"] | ["mod", "rf", "full"] => {
            Ok(ModelSpec::Modified { depth: None })
        }
        ["mod", "rf", d] => Ok(ModelSpec::Modified { depth: parse_depth(d)? }),
        _ => bail!("unknown model spec {s:?}"),
    }
}

impl FromStr for ModelSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let stages: Vec<&str> = s.split('+').collect();
        match stages.as_slice() {
            [single] => parse_single(single),
            [base, boost] => Ok(ModelSpec::Boosted {
                base: Box::new(parse_single(base)?),
                boost: Box::new(parse_single(boost)?),
            }),
            _ => bail!("a boosted spec has exactly two stages, got {s:?}"),
        }
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSpec::Linear => f.write_str("lm"),
            ModelSpec::Forest { depth: None } => f.write_str("rf:full"),
            ModelSpec::Forest { depth: Some(d) } => write!(f, "rf:{d}"),
            ModelSpec::Gbt => f.write_str("xgb"),
            ModelSpec::Network { hidden, activation } => {
                let a = match activation {
                    Activation::Sigmoid => "sigmoid",
                    Activation::Relu => "relu",
                };
                write!(f, "nn:{hidden}:{a}")
            }
            ModelSpec::Kernel { kernel, bandwidth } => {
                let k = match kernel {
                    KernelFn::Gaussian => "gaussian",
                    KernelFn::Uniform => "uniform",
                };
                write!(f, "nw:{k}:{bandwidth}")
            }
            ModelSpec::Modified { depth: None } => f.write_str("mod:rf:full"),
            ModelSpec::Modified { depth: Some(d) } => write!(f, "mod:rf:{d}"),
            ModelSpec::Boosted { base, boost } => write!(f, "{base}+{boost}"),
        }
    }
}

/// Ensemble size shared by every subsampled model in a run.
#[derive(Debug, Clone, Copy)]
pub struct FitSettings {
    pub trees: usize,
    pub subsample: usize,
}

/// A fitted member of the roster.
pub enum FittedModel {
    Linear(FittedMEstimator<LeastSquares>),
    Forest(Ensemble<RegressionTree>),
    Gbt(Ensemble<GbtModel>),
    Network(FittedMEstimator<OneHiddenLayer>),
    Kernel(NadarayaWatson),
    Modified(LocalModifier),
    Boosted(TwoStageModel),
}

fn tree_config(depth: Option<usize>) -> TreeConfig {
    TreeConfig {
        max_depth: depth.map_or(Depth::Full, Depth::Max),
        ..TreeConfig::default()
    }
}

fn fit_forest(
    data: &Dataset,
    depth: Option<usize>,
    st: &FitSettings,
    seed: SeedSpec,
) -> Result<Ensemble<RegressionTree>, Error> {
    let cfg = EnsembleConfig { n_members: st.trees, subsample: st.subsample };
    let tree_cfg = tree_config(depth);
    fit_ensemble(data, &cfg, |d, counts, s| fit_tree(d, counts, &tree_cfg, s), seed)
}

/// Fit one model. Every stochastic stage derives its randomness from
/// `seed`, so two models fit with different seeds are independent.
pub fn fit_model(
    spec: &ModelSpec,
    data: &Dataset,
    st: &FitSettings,
    seed: SeedSpec,
) -> Result<FittedModel, Error> {
    match spec {
        ModelSpec::Linear => Ok(FittedModel::Linear(fit_linear(data)?)),
        ModelSpec::Forest { depth } => {
            Ok(FittedModel::Forest(fit_forest(data, *depth, st, seed)?))
        }
        ModelSpec::Gbt => {
            let cfg = EnsembleConfig { n_members: st.trees, subsample: st.subsample };
            let gbt = GbtConfig::default();
            let ens = fit_ensemble(
                data,
                &cfg,
                |d, counts, s| fit_gbt_weighted(d, counts, &gbt, s),
                seed,
            )?;
            Ok(FittedModel::Gbt(ens))
        }
        ModelSpec::Network { hidden, activation } => {
            let cfg = NetConfig {
                hidden_units: *hidden,
                activation: *activation,
                ..NetConfig::default()
            };
            Ok(FittedModel::Network(fit_network(data, &cfg, seed)?))
        }
        ModelSpec::Kernel { kernel, bandwidth } => {
            let spec = KernelSpec::new(*kernel, *bandwidth)?;
            Ok(FittedModel::Kernel(NadarayaWatson::fit(data, spec)?))
        }
        ModelSpec::Modified { depth } => {
            let forest = fit_forest(data, *depth, st, seed)?;
            Ok(FittedModel::Modified(LocalModifier::new(
                forest,
                data.clone(),
                ResidualMode::FullForest,
            )?))
        }
        ModelSpec::Boosted { base, boost } => {
            let st1 = *st;
            let st2 = *st;
            let base_spec = (**base).clone();
            let boost_spec = (**boost).clone();
            let two = fit_boost(
                data,
                move |d| fit_model(&base_spec, d, &st1, seed.child(0)).map(into_dyn),
                move |d| fit_model(&boost_spec, d, &st2, seed.child(1)).map(into_dyn),
            )?;
            Ok(FittedModel::Boosted(two))
        }
    }
}

fn into_dyn(m: FittedModel) -> Box<dyn PredictiveModel> {
    match m {
        FittedModel::Linear(x) => Box::new(x),
        FittedModel::Forest(x) => Box::new(x),
        FittedModel::Gbt(x) => Box::new(x),
        FittedModel::Network(x) => Box::new(x),
        FittedModel::Kernel(x) => Box::new(x),
        FittedModel::Modified(x) => Box::new(x),
        FittedModel::Boosted(x) => Box::new(x),
    }
}

fn ensemble_variances<M: Predictor>(
    ens: &Ensemble<M>,
    queries: &QuerySet,
    correction: Correction,
) -> Result<Vec<f64>, Error> {
    let preds = ens.member_predictions(queries);
    match correction {
        Correction::Raw => {
            let u = raw_ij_derivatives(ens.inbag(), &preds)?;
            let n2 = (u.nrows() * u.nrows()) as f64;
            Ok((0..u.ncols())
                .map(|j| u.column(j).iter().map(|v| v * v).sum::<f64>() / n2)
                .collect())
        }
        Correction::Ranger => {
            let c = ranger_corrected_cov(ens.inbag(), &preds)?;
            Ok((0..queries.len()).map(|j| c[(j, j)]).collect())
        }
        Correction::Vstat => {
            let c = vstat_corrected_cov(ens.inbag(), &preds)?;
            Ok((0..queries.len()).map(|j| c[(j, j)]).collect())
        }
    }
}

impl FittedModel {
    pub fn predictions(&self, queries: &QuerySet) -> Result<Vec<f64>, Error> {
        match self {
            FittedModel::Linear(m) => m.predict_set(queries),
            FittedModel::Forest(m) => Ok(m.predict_set(queries)),
            FittedModel::Gbt(m) => Ok(m.predict_set(queries)),
            FittedModel::Network(m) => m.predict_set(queries),
            FittedModel::Kernel(m) => m.predict_set(queries),
            FittedModel::Modified(m) => m.predict_set(queries),
            FittedModel::Boosted(m) => m.predict_set(queries),
        }
    }

    /// Pointwise variance of each prediction. The `correction` applies to
    /// plain subsampled ensembles; other models use the estimate their
    /// structure dictates.
    pub fn variances(
        &self,
        queries: &QuerySet,
        correction: Correction,
    ) -> Result<Vec<f64>, Error> {
        match self {
            FittedModel::Linear(m) => {
                let c = m.ij_cov(queries)?;
                Ok((0..queries.len()).map(|j| c[(j, j)]).collect())
            }
            FittedModel::Network(m) => {
                let c = m.ij_cov(queries)?;
                Ok((0..queries.len()).map(|j| c[(j, j)]).collect())
            }
            FittedModel::Kernel(m) => {
                let c = m.ij_cov(queries)?;
                Ok((0..queries.len()).map(|j| c[(j, j)]).collect())
            }
            FittedModel::Forest(m) => ensemble_variances(m, queries, correction),
            FittedModel::Gbt(m) => ensemble_variances(m, queries, correction),
            FittedModel::Modified(m) => m.variances(queries),
            FittedModel::Boosted(m) => {
                let c = m.combined_cov(queries)?;
                Ok((0..queries.len()).map(|j| c[(j, j)]).collect())
            }
        }
    }

    /// The underlying two-stage model, when this is a boosted fit.
    pub fn as_boosted(&self) -> Option<&TwoStageModel> {
        match self {
            FittedModel::Boosted(m) => Some(m),
            _ => None,
        }
    }
}

impl PredictiveModel for FittedModel {
    fn eval(&self, x: &[f64]) -> Result<f64, Error> {
        match self {
            FittedModel::Linear(m) => m.eval(x),
            FittedModel::Forest(m) => m.eval(x),
            FittedModel::Gbt(m) => m.eval(x),
            FittedModel::Network(m) => m.eval(x),
            FittedModel::Kernel(m) => m.eval(x),
            FittedModel::Modified(m) => m.eval(x),
            FittedModel::Boosted(m) => m.eval(x),
        }
    }

    fn eval_row(&self, data: &Dataset, row: usize) -> Result<f64, Error> {
        match self {
            FittedModel::Linear(m) => m.eval_row(data, row),
            FittedModel::Forest(m) => m.eval_row(data, row),
            FittedModel::Gbt(m) => m.eval_row(data, row),
            FittedModel::Network(m) => m.eval_row(data, row),
            FittedModel::Kernel(m) => m.eval_row(data, row),
            FittedModel::Modified(m) => m.eval_row(data, row),
            FittedModel::Boosted(m) => m.eval_row(data, row),
        }
    }

    fn field(&self, queries: &QuerySet) -> Result<DerivativeField, Error> {
        match self {
            FittedModel::Linear(m) => m.field(queries),
            FittedModel::Forest(m) => m.field(queries),
            FittedModel::Gbt(m) => m.field(queries),
            FittedModel::Network(m) => m.field(queries),
            FittedModel::Kernel(m) => m.field(queries),
            FittedModel::Modified(m) => m.field(queries),
            FittedModel::Boosted(m) => m.field(queries),
        }
    }
}
