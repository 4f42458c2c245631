//! M-estimators and their infinitesimal jackknife derivatives.
//!
//! An M-estimator maximizes `sum_i m(theta, Z_i)`. Writing `eta(theta, x)`
//! for the fitted prediction function, the IJ derivative of the prediction
//! with respect to observation `i` is
//!
//! ```text
//! U_i(x) = -grad_eta(x)^T [E grad^2 m]^{-1} grad m(theta_hat, Z_i)
//! ```
//!
//! and the plug-in covariance of predictions is `(1/n^2) U^T U`, which for
//! least squares reproduces the Huber sandwich exactly. When the mean
//! Hessian is badly conditioned a small ridge is subtracted from the
//! maximization Hessian (it is negative semidefinite, so this pushes it
//! away from singularity) and the fit is marked `regularized`.

use nalgebra::{DMatrix, DVector, Dyn, LU};

use crate::data::{Dataset, QuerySet};
use crate::error::{Error, Result};

/// Condition number above which the mean Hessian gets ridged.
const COND_LIMIT: f64 = 1e5;
/// Ridge added to the negated mean Hessian when it is ill conditioned.
const RIDGE: f64 = 1e-3;

/// A per-observation maximization objective `m(theta, Z_i)` together with
/// the prediction function `eta(theta, x)` it induces.
pub trait MObjective: Send + Sync {
    fn param_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// True when the objective has kinks (derivatives are only almost-
    /// everywhere valid and the IJ expansion is heuristic).
    fn nonsmooth(&self) -> bool {
        false
    }

    /// `m(theta, Z_i)` for training row `i`.
    fn value(&self, theta: &DVector<f64>, data: &Dataset, row: usize) -> f64;

    /// Gradient of `m` in `theta` for row `i`.
    fn score_into(
        &self,
        theta: &DVector<f64>,
        data: &Dataset,
        row: usize,
        out: &mut DVector<f64>,
    );

    /// Hessian of `m` in `theta` for row `i`.
    fn hess_into(
        &self,
        theta: &DVector<f64>,
        data: &Dataset,
        row: usize,
        out: &mut DMatrix<f64>,
    );

    /// `eta(theta, x)`.
    fn predict(&self, theta: &DVector<f64>, x: &[f64]) -> f64;

    /// Gradient of `eta` in `theta` at the point `x`.
    fn predict_grad_into(&self, theta: &DVector<f64>, x: &[f64], out: &mut DVector<f64>);
}

/// A fitted M-estimator with everything the IJ needs cached: per-row
/// scores, the mean Hessian, and a factorization of its (possibly ridged)
/// negation.
pub struct FittedMEstimator<O: MObjective> {
    objective: O,
    theta: DVector<f64>,
    /// Column `i` holds the score of row `i`; `p x n`.
    scores: DMatrix<f64>,
    /// `A = -(1/n) sum_i hess_i`, before any ridge.
    neg_mean_hessian: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
    cond: f64,
    regularized: bool,
    mean_score_norm: f64,
    n: usize,
}

impl<O: MObjective> FittedMEstimator<O> {
    /// Wrap a parameter vector as a fitted estimator, computing the score
    /// matrix and mean Hessian at `theta`.
    pub fn new(objective: O, theta: DVector<f64>, data: &Dataset) -> Result<Self> {
        let p = objective.param_dim();
        if theta.len() != p {
            return Err(Error::Dimension(format!(
                "theta has {} entries, objective expects {p}",
                theta.len()
            )));
        }
        if objective.input_dim() != data.dim() {
            return Err(Error::Dimension(format!(
                "objective expects {} covariates, data has {}",
                objective.input_dim(),
                data.dim()
            )));
        }
        let n = data.n();
        let mut scores = DMatrix::zeros(p, n);
        let mut s = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        let mut hsum = DMatrix::zeros(p, p);
        for i in 0..n {
            objective.score_into(&theta, data, i, &mut s);
            scores.set_column(i, &s);
            objective.hess_into(&theta, data, i, &mut h);
            hsum += &h;
        }
        let neg_mean_hessian = -hsum / n as f64;
        if neg_mean_hessian.iter().any(|v| !v.is_finite())
            || scores.iter().any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("score or hessian at the fitted parameter"));
        }
        let mean_score_norm = (scores.column_sum() / n as f64).norm();

        let sv = neg_mean_hessian.singular_values();
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        let regularized = !(cond <= COND_LIMIT);
        let mut ridged = neg_mean_hessian.clone();
        if regularized {
            for k in 0..p {
                ridged[(k, k)] += RIDGE;
            }
        }
        let lu = ridged.lu();
        if !lu.is_invertible() {
            return Err(Error::Degenerate(
                "mean hessian is singular even after ridging".into(),
            ));
        }
        Ok(FittedMEstimator {
            objective,
            theta,
            scores,
            neg_mean_hessian,
            lu,
            cond,
            regularized,
            mean_score_norm,
            n,
        })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn objective(&self) -> &O {
        &self.objective
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Condition number of the unridged negated mean Hessian.
    pub fn cond(&self) -> f64 {
        self.cond
    }

    pub fn regularized(&self) -> bool {
        self.regularized
    }

    /// Norm of the mean score at `theta`; near zero at an exact optimum.
    pub fn mean_score_norm(&self) -> f64 {
        self.mean_score_norm
    }

    pub fn nonsmooth(&self) -> bool {
        self.objective.nonsmooth()
    }

    pub fn neg_mean_hessian(&self) -> &DMatrix<f64> {
        &self.neg_mean_hessian
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.objective.input_dim() {
            return Err(Error::Dimension(format!(
                "query has {} entries, objective expects {}",
                x.len(),
                self.objective.input_dim()
            )));
        }
        Ok(self.objective.predict(&self.theta, x))
    }

    pub fn predict_set(&self, queries: &QuerySet) -> Result<Vec<f64>> {
        queries.rows().map(|x| self.predict(x)).collect()
    }

    /// The `n x m` IJ derivative matrix over the query points. With
    /// `A = -(1/n) sum hess` this is `U_{i,j} = grad_eta(x_j)^T A^{-1} s_i`.
    pub fn derivatives(&self, queries: &QuerySet) -> Result<DMatrix<f64>> {
        let p = self.objective.param_dim();
        let m = queries.len();
        if queries.dim() != self.objective.input_dim() {
            return Err(Error::Dimension(format!(
                "queries have {} covariates, objective expects {}",
                queries.dim(),
                self.objective.input_dim()
            )));
        }
        let mut g = DMatrix::zeros(p, m);
        let mut col = DVector::zeros(p);
        for (j, x) in queries.rows().enumerate() {
            self.objective.predict_grad_into(&self.theta, x, &mut col);
            g.set_column(j, &col);
        }
        let solved = self
            .lu
            .solve(&g)
            .ok_or_else(|| Error::Degenerate("hessian solve failed".into()))?;
        Ok(self.scores.transpose() * solved)
    }

    /// IJ covariance of predictions at the query points, `(1/n^2) U^T U`.
    pub fn ij_cov(&self, queries: &QuerySet) -> Result<DMatrix<f64>> {
        let u = self.derivatives(queries)?;
        let n2 = (self.n * self.n) as f64;
        Ok(u.transpose() * &u / n2)
    }
}

/// Ordinary least squares with an intercept, phrased as the maximization
/// objective `m(theta, z) = -(y - eta)^2` with `eta = theta_0 + x^T theta_1..`.
pub struct LeastSquares {
    dim: usize,
}

impl LeastSquares {
    pub fn new(dim: usize) -> Self {
        LeastSquares { dim }
    }

    fn eta(&self, theta: &DVector<f64>, x: &[f64]) -> f64 {
        let mut v = theta[0];
        for j in 0..self.dim {
            v += theta[j + 1] * x[j];
        }
        v
    }

    fn eta_row(&self, theta: &DVector<f64>, data: &Dataset, row: usize) -> f64 {
        let mut v = theta[0];
        for j in 0..self.dim {
            v += theta[j + 1] * data.xv(row, j);
        }
        v
    }
}

impl MObjective for LeastSquares {
    fn param_dim(&self) -> usize {
        self.dim + 1
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn value(&self, theta: &DVector<f64>, data: &Dataset, row: usize) -> f64 {
        let r = data.y()[row] - self.eta_row(theta, data, row);
        -r * r
    }

    fn score_into(
        &self,
        theta: &DVector<f64>,
        data: &Dataset,
        row: usize,
        out: &mut DVector<f64>,
    ) {
        let r = data.y()[row] - self.eta_row(theta, data, row);
        out[0] = 2.0 * r;
        for j in 0..self.dim {
            out[j + 1] = 2.0 * r * data.xv(row, j);
        }
    }

    fn hess_into(
        &self,
        _theta: &DVector<f64>,
        data: &Dataset,
        row: usize,
        out: &mut DMatrix<f64>,
    ) {
        // -2 xt xt^T with xt = (1, x).
        out[(0, 0)] = -2.0;
        for j in 0..self.dim {
            let xj = data.xv(row, j);
            out[(0, j + 1)] = -2.0 * xj;
            out[(j + 1, 0)] = -2.0 * xj;
            for k in 0..self.dim {
                out[(j + 1, k + 1)] = -2.0 * xj * data.xv(row, k);
            }
        }
    }

    fn predict(&self, theta: &DVector<f64>, x: &[f64]) -> f64 {
        self.eta(theta, x)
    }

    fn predict_grad_into(&self, _theta: &DVector<f64>, x: &[f64], out: &mut DVector<f64>) {
        out[0] = 1.0;
        for j in 0..self.dim {
            out[j + 1] = x[j];
        }
    }
}

/// Fit ordinary least squares (intercept always included) and wrap it for
/// IJ computation. Rank-deficient designs are rejected.
pub fn fit_linear(data: &Dataset) -> Result<FittedMEstimator<LeastSquares>> {
    let n = data.n();
    let d = data.dim();
    let p = d + 1;
    let mut xt = DMatrix::zeros(n, p);
    for i in 0..n {
        xt[(i, 0)] = 1.0;
        for j in 0..d {
            xt[(i, j + 1)] = data.xv(i, j);
        }
    }
    let svd = xt.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = smax * n.max(p) as f64 * f64::EPSILON;
    let rank = svd.rank(eps);
    if rank < p {
        return Err(Error::SingularDesign { rank, cols: p });
    }
    let theta = svd
        .solve(data.y(), eps)
        .map_err(|e| Error::Degenerate(e.into()))?;
    FittedMEstimator::new(LeastSquares::new(d), theta, data)
}
