//! Cross-model covariance, chi-squared comparison tests, two-stage
//! boosting, and interval construction.
//!
//! Every model exposes its IJ derivative matrix `U` (rows index training
//! observations, columns index query points). Because all models here are
//! trained on the same sample, cross-model covariances come from the same
//! plug-in rule as single-model ones:
//!
//! ```text
//! Cov(f_p(x_i), f_q(x_j)) ~= (1/n^2) sum_k U_k^(p)(x_i) U_k^(q)(x_j)
//! ```
//!
//! Ensembles additionally carry a V-statistics corrected estimate of their
//! own covariance block, which replaces the raw Gram block on the diagonal
//! of the joint covariance. The difference of two models at `m` query
//! points, scaled by the inverse of its estimated covariance, is referred
//! to a chi-squared distribution with `m` degrees of freedom.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, QuerySet};
use crate::dist::{chisq_sf, normal_quantile};
use crate::ensemble::{raw_ij_derivatives, vstat_corrected_cov, Ensemble, Predictor};
use crate::error::{Error, Result};
use crate::kernel::{LocalModifier, NadarayaWatson};
use crate::mest::{FittedMEstimator, MObjective};

/// Condition number above which a comparison covariance is treated as
/// singular.
const COND_LIMIT: f64 = 1e12;

/// IJ derivative matrix of one model at fixed query points, with an
/// optional corrected estimate of the model's own covariance block.
#[derive(Debug, Clone)]
pub struct DerivativeField {
    u: DMatrix<f64>,
    vstat: Option<DMatrix<f64>>,
}

impl DerivativeField {
    pub fn new(u: DMatrix<f64>, vstat: Option<DMatrix<f64>>) -> Result<Self> {
        if u.nrows() == 0 || u.ncols() == 0 {
            return Err(Error::Empty("derivative field"));
        }
        if let Some(v) = &vstat {
            if v.nrows() != u.ncols() || v.ncols() != u.ncols() {
                return Err(Error::Dimension(format!(
                    "self covariance is {}x{}, field has {} queries",
                    v.nrows(),
                    v.ncols(),
                    u.ncols()
                )));
            }
        }
        Ok(DerivativeField { u, vstat })
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub fn queries(&self) -> usize {
        self.u.ncols()
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// Raw plug-in cross covariance with another field fit on the same
    /// sample: `(1/n^2) U^T U'`.
    pub fn gram_cov(&self, other: &DerivativeField) -> Result<DMatrix<f64>> {
        if self.n() != other.n() {
            return Err(Error::Dimension(format!(
                "fields were fit on {} and {} observations",
                self.n(),
                other.n()
            )));
        }
        let n2 = (self.n() * self.n()) as f64;
        Ok(self.u.transpose() * &other.u / n2)
    }

    /// The model's own covariance block: the corrected estimate when one
    /// is attached, the raw Gram block otherwise.
    pub fn self_cov(&self) -> Result<DMatrix<f64>> {
        match &self.vstat {
            Some(v) => Ok(v.clone()),
            None => self.gram_cov(self),
        }
    }
}

/// A fitted model that can predict and report its IJ derivative field.
pub trait PredictiveModel: Send + Sync {
    fn eval(&self, x: &[f64]) -> Result<f64>;

    fn eval_row(&self, data: &Dataset, row: usize) -> Result<f64> {
        self.eval(&data.row(row))
    }

    fn field(&self, queries: &QuerySet) -> Result<DerivativeField>;
}

fn eval_points(model: &dyn PredictiveModel, queries: &QuerySet) -> Result<Vec<f64>> {
    queries.rows().map(|x| model.eval(x)).collect()
}

impl<M: Predictor> PredictiveModel for Ensemble<M> {
    fn eval(&self, x: &[f64]) -> Result<f64> {
        Ok(self.predict(x))
    }

    fn eval_row(&self, data: &Dataset, row: usize) -> Result<f64> {
        Ok(self.predict_row(data, row))
    }

    fn field(&self, queries: &QuerySet) -> Result<DerivativeField> {
        let preds = self.member_predictions(queries);
        let u = raw_ij_derivatives(self.inbag(), &preds)?;
        let vstat = vstat_corrected_cov(self.inbag(), &preds)?;
        DerivativeField::new(u, Some(vstat))
    }
}

impl<O: MObjective> PredictiveModel for FittedMEstimator<O> {
    fn eval(&self, x: &[f64]) -> Result<f64> {
        self.predict(x)
    }

    fn field(&self, queries: &QuerySet) -> Result<DerivativeField> {
        DerivativeField::new(self.derivatives(queries)?, None)
    }
}

impl PredictiveModel for NadarayaWatson {
    fn eval(&self, x: &[f64]) -> Result<f64> {
        self.predict(x)
    }

    fn field(&self, queries: &QuerySet) -> Result<DerivativeField> {
        DerivativeField::new(self.derivatives(queries)?, None)
    }
}

impl PredictiveModel for LocalModifier {
    fn eval(&self, x: &[f64]) -> Result<f64> {
        self.predict(x)
    }

    fn field(&self, queries: &QuerySet) -> Result<DerivativeField> {
        DerivativeField::new(self.derivatives(queries)?, None)
    }
}

/// The four covariance blocks of a model pair at shared query points.
#[derive(Debug, Clone)]
pub struct CovBlocks {
    pub s11: DMatrix<f64>,
    pub s12: DMatrix<f64>,
    pub s21: DMatrix<f64>,
    pub s22: DMatrix<f64>,
}

impl CovBlocks {
    /// Covariance of the difference `f_1 - f_2`.
    pub fn difference(&self) -> DMatrix<f64> {
        &self.s11 + &self.s22 - &self.s12 - &self.s21
    }

    /// Covariance of the sum `f_1 + f_2`.
    pub fn combined(&self) -> DMatrix<f64> {
        &self.s11 + &self.s22 + &self.s12 + &self.s21
    }
}

/// Assemble the joint covariance blocks of two fields. Diagonal blocks use
/// each field's own (possibly corrected) estimate; off-diagonal blocks are
/// raw Gram covariances.
pub fn cov_blocks(a: &DerivativeField, b: &DerivativeField) -> Result<CovBlocks> {
    if a.queries() != b.queries() {
        return Err(Error::Dimension(format!(
            "fields cover {} and {} queries",
            a.queries(),
            b.queries()
        )));
    }
    let s12 = a.gram_cov(b)?;
    Ok(CovBlocks {
        s11: a.self_cov()?,
        s21: s12.transpose(),
        s12,
        s22: b.self_cov()?,
    })
}

/// Outcome of a chi-squared comparison.
#[derive(Debug, Clone, Copy)]
pub struct ComparisonResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Condition number of the covariance that was inverted; zero for the
    /// degenerate short circuit where no inversion happened.
    pub condition_number: f64,
}

/// Quadratic-form test of `d = 0` against `d^T Sigma^{-1} d ~ chisq_m`,
/// inverting through a symmetric eigendecomposition so degeneracy is
/// detected instead of amplified.
fn quadratic_test(diff: &[f64], sigma: &DMatrix<f64>) -> Result<ComparisonResult> {
    let m = diff.len();
    if m == 0 {
        return Err(Error::Empty("comparison"));
    }
    if sigma.nrows() != m || sigma.ncols() != m {
        return Err(Error::Dimension(format!(
            "covariance is {}x{}, difference has {m} entries",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if diff.iter().any(|v| !v.is_finite()) || sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("comparison inputs"));
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if lmin <= 0.0 {
        return Err(Error::SingularCovariance { cond: f64::INFINITY });
    }
    let cond = lmax / lmin;
    if cond > COND_LIMIT {
        return Err(Error::SingularCovariance { cond });
    }
    let d = DVector::from_column_slice(diff);
    let proj = eig.eigenvectors.transpose() * d;
    let statistic: f64 =
        (0..m).map(|k| proj[k] * proj[k] / eig.eigenvalues[k]).sum();
    let p_value = chisq_sf(statistic, m)?;
    Ok(ComparisonResult { statistic, df: m, p_value, condition_number: cond })
}

/// Test whether two models agree at the query points, given their
/// predictions and joint covariance blocks. The statistic is the squared
/// Mahalanobis norm of `f1 - f2` under the difference covariance, referred
/// to chi-squared with one degree of freedom per query point.
pub fn compare_models(
    f1: &[f64],
    f2: &[f64],
    blocks: &CovBlocks,
) -> Result<ComparisonResult> {
    if f1.len() != f2.len() {
        return Err(Error::Dimension(format!(
            "prediction vectors have lengths {} and {}",
            f1.len(),
            f2.len()
        )));
    }
    let diff: Vec<f64> = f1.iter().zip(f2).map(|(x, y)| x - y).collect();
    quadratic_test(&diff, &blocks.difference())
}

/// Convenience wrapper over [`compare_models`]: evaluate both fitted
/// models at the query points, assemble their covariance blocks, and run
/// the test.
pub fn compare_fitted(
    a: &dyn PredictiveModel,
    b: &dyn PredictiveModel,
    queries: &QuerySet,
) -> Result<ComparisonResult> {
    let fa = a.field(queries)?;
    let fb = b.field(queries)?;
    let blocks = cov_blocks(&fa, &fb)?;
    let pa = eval_points(a, queries)?;
    let pb = eval_points(b, queries)?;
    compare_models(&pa, &pb, &blocks)
}

/// Test whether a correction stage `g` is indistinguishable from zero
/// under its covariance `sigma`. A stage that is exactly zero everywhere
/// short-circuits to a statistic of zero with p-value one, since its
/// covariance is degenerate by construction.
pub fn stage_test(g: &[f64], sigma: &DMatrix<f64>) -> Result<ComparisonResult> {
    if g.is_empty() {
        return Err(Error::Empty("comparison"));
    }
    if g.iter().all(|v| *v == 0.0) {
        return Ok(ComparisonResult {
            statistic: 0.0,
            df: g.len(),
            p_value: 1.0,
            condition_number: 0.0,
        });
    }
    quadratic_test(g, sigma)
}

/// A two-stage additive model: stage two was fit to the residuals of stage
/// one, and the combined prediction is their sum.
pub struct TwoStageModel {
    stage1: Box<dyn PredictiveModel>,
    stage2: Box<dyn PredictiveModel>,
}

/// Fit a boosted pair: the base stage on the data, the boost stage on the
/// base stage's training residuals.
pub fn fit_boost<F1, F2>(
    data: &Dataset,
    base_fitter: F1,
    boost_fitter: F2,
) -> Result<TwoStageModel>
where
    F1: FnOnce(&Dataset) -> Result<Box<dyn PredictiveModel>>,
    F2: FnOnce(&Dataset) -> Result<Box<dyn PredictiveModel>>,
{
    let stage1 = base_fitter(data)?;
    let n = data.n();
    let mut resid = DVector::zeros(n);
    for i in 0..n {
        resid[i] = data.y()[i] - stage1.eval_row(data, i)?;
    }
    let residual_data = data.with_response(resid)?;
    let stage2 = boost_fitter(&residual_data)?;
    Ok(TwoStageModel { stage1, stage2 })
}

impl TwoStageModel {
    pub fn from_parts(
        stage1: Box<dyn PredictiveModel>,
        stage2: Box<dyn PredictiveModel>,
    ) -> Self {
        TwoStageModel { stage1, stage2 }
    }

    pub fn stage1(&self) -> &dyn PredictiveModel {
        self.stage1.as_ref()
    }

    pub fn stage2(&self) -> &dyn PredictiveModel {
        self.stage2.as_ref()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.stage1.eval(x)? + self.stage2.eval(x)?)
    }

    pub fn predict_set(&self, queries: &QuerySet) -> Result<Vec<f64>> {
        queries.rows().map(|x| self.predict(x)).collect()
    }

    /// Covariance of the combined prediction: all four blocks summed, so
    /// the cross terms between the stages are kept.
    pub fn combined_cov(&self, queries: &QuerySet) -> Result<DMatrix<f64>> {
        let f1 = self.stage1.field(queries)?;
        let f2 = self.stage2.field(queries)?;
        Ok(cov_blocks(&f1, &f2)?.combined())
    }
}

impl PredictiveModel for TwoStageModel {
    fn eval(&self, x: &[f64]) -> Result<f64> {
        self.predict(x)
    }

    fn eval_row(&self, data: &Dataset, row: usize) -> Result<f64> {
        Ok(self.stage1.eval_row(data, row)? + self.stage2.eval_row(data, row)?)
    }

    fn field(&self, queries: &QuerySet) -> Result<DerivativeField> {
        let f1 = self.stage1.field(queries)?;
        let f2 = self.stage2.field(queries)?;
        let combined = cov_blocks(&f1, &f2)?.combined();
        DerivativeField::new(f1.u() + f2.u(), Some(combined))
    }
}

/// Test whether the boost stage of a two-stage model adds signal: its
/// predictions at the query points against its own covariance.
pub fn compare_boost_stage(
    model: &TwoStageModel,
    queries: &QuerySet,
) -> Result<ComparisonResult> {
    let g = eval_points(model.stage2.as_ref(), queries)?;
    let sigma = model.stage2.field(queries)?.self_cov()?;
    stage_test(&g, &sigma)
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    Ok(())
}

fn check_variance(variance: f64) -> Result<()> {
    if !variance.is_finite() {
        return Err(Error::NonFinite("variance"));
    }
    if variance < 0.0 {
        return Err(Error::NegativeVariance { index: 0, value: variance });
    }
    Ok(())
}

/// Two-sided normal confidence interval `estimate +- z sqrt(variance)`.
pub fn confidence_interval(estimate: f64, variance: f64, level: f64) -> Result<(f64, f64)> {
    check_level(level)?;
    check_variance(variance)?;
    let z = normal_quantile(0.5 + level / 2.0)?;
    let half = z * variance.sqrt();
    Ok((estimate - half, estimate + half))
}

/// Reproduction interval: where an independent replication of the whole
/// pipeline would land. The replicate adds its own, equally large,
/// sampling noise, hence the doubled variance.
pub fn reproduction_interval(
    estimate: f64,
    variance: f64,
    level: f64,
) -> Result<(f64, f64)> {
    check_level(level)?;
    check_variance(variance)?;
    let z = normal_quantile(0.5 + level / 2.0)?;
    let half = z * (2.0 * variance).sqrt();
    Ok((estimate - half, estimate + half))
}

/// Confidence intervals for a two-stage model at each query point, using
/// the diagonal of the full combined covariance. Fails when any corrected
/// variance estimate is negative.
pub fn combined_interval(
    model: &TwoStageModel,
    queries: &QuerySet,
    level: f64,
) -> Result<Vec<(f64, f64)>> {
    check_level(level)?;
    let estimates = model.predict_set(queries)?;
    let cov = model.combined_cov(queries)?;
    let mut out = Vec::with_capacity(queries.len());
    for (j, est) in estimates.iter().enumerate() {
        let v = cov[(j, j)];
        if !v.is_finite() {
            return Err(Error::NonFinite("variance"));
        }
        if v < 0.0 {
            return Err(Error::NegativeVariance { index: j, value: v });
        }
        out.push(confidence_interval(*est, v, level)?);
    }
    Ok(out)
}
