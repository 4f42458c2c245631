//! Kernel smoothers and local model modification.
//!
//! Both constructions share one derivative rule. A weighted local average
//! `p/q` with `p = sum_k C_k V_k` and `q = sum_k C_k` has IJ derivative
//!
//! ```text
//! U_i = (r q - p s) / q^2,    r = n C_i V_i,    s = n C_i
//! ```
//!
//! For the Nadaraya-Watson smoother the weights come from a kernel and
//! `V_k = Y_k`. For local modification of a forest the weights count
//! members where row `k` is out of bag and lands in the same leaf as the
//! query, and `V_k = D_k` is a residual; the modified prediction adds the
//! resulting bias estimate to the forest prediction, and its variance uses
//! the summed derivative fields.

use nalgebra::DMatrix;

use crate::data::{Dataset, QuerySet};
use crate::ensemble::{raw_ij_derivatives, Ensemble};
use crate::error::{Error, Result};
use crate::tree::RegressionTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFn {
    Gaussian,
    Uniform,
}

impl KernelFn {
    /// Weight for a point at Euclidean distance `dist` under bandwidth `h`.
    #[inline]
    pub fn weight(self, dist: f64, h: f64) -> f64 {
        match self {
            KernelFn::Gaussian => (-0.5 * (dist / h).powi(2)).exp(),
            KernelFn::Uniform => {
                if dist <= h {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KernelSpec {
    pub kernel: KernelFn,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(kernel: KernelFn, bandwidth: f64) -> Result<Self> {
        let spec = KernelSpec { kernel, bandwidth };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(
                "bandwidth must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

fn euclidean(data: &Dataset, row: usize, x: &[f64]) -> f64 {
    (0..data.dim())
        .map(|j| (data.xv(row, j) - x[j]).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn check_query_dim(data: &Dataset, len: usize) -> Result<()> {
    if len != data.dim() {
        return Err(Error::Dimension(format!(
            "query has {len} covariates, data has {}",
            data.dim()
        )));
    }
    Ok(())
}

fn kernel_weights(data: &Dataset, spec: &KernelSpec, x: &[f64], out: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (k, slot) in out.iter_mut().enumerate() {
        let w = spec.kernel.weight(euclidean(data, k, x), spec.bandwidth);
        *slot = w;
        total += w;
    }
    total
}

/// Nadaraya-Watson estimate at `x`: the kernel-weighted mean of the
/// responses. Errors when no training point carries weight.
pub fn nw_predict(data: &Dataset, spec: &KernelSpec, x: &[f64]) -> Result<f64> {
    spec.validate()?;
    check_query_dim(data, x.len())?;
    let mut w = vec![0.0; data.n()];
    let q = kernel_weights(data, spec, x, &mut w);
    if q <= 0.0 {
        return Err(Error::EmptyNeighborhood);
    }
    let p: f64 = w.iter().zip(data.y().iter()).map(|(c, y)| c * y).sum();
    Ok(p / q)
}

/// IJ derivative matrix of the smoother over the query points, `n x m`.
pub fn nw_derivatives(
    data: &Dataset,
    spec: &KernelSpec,
    queries: &QuerySet,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    check_query_dim(data, queries.dim())?;
    let n = data.n();
    let mut u = DMatrix::zeros(n, queries.len());
    let mut w = vec![0.0; n];
    for (j, x) in queries.rows().enumerate() {
        let q = kernel_weights(data, spec, x, &mut w);
        if q <= 0.0 {
            return Err(Error::EmptyNeighborhood);
        }
        let p: f64 = w.iter().zip(data.y().iter()).map(|(c, y)| c * y).sum();
        let q2 = q * q;
        for i in 0..n {
            let r = n as f64 * w[i] * data.y()[i];
            let s = n as f64 * w[i];
            u[(i, j)] = (r * q - p * s) / q2;
        }
    }
    Ok(u)
}

/// A kernel smoother bound to its training data.
#[derive(Debug, Clone)]
pub struct NadarayaWatson {
    data: Dataset,
    spec: KernelSpec,
}

impl NadarayaWatson {
    pub fn fit(data: &Dataset, spec: KernelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(NadarayaWatson { data: data.clone(), spec })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        nw_predict(&self.data, &self.spec, x)
    }

    pub fn predict_set(&self, queries: &QuerySet) -> Result<Vec<f64>> {
        queries.rows().map(|x| self.predict(x)).collect()
    }

    pub fn derivatives(&self, queries: &QuerySet) -> Result<DMatrix<f64>> {
        nw_derivatives(&self.data, &self.spec, queries)
    }

    /// IJ covariance at the query points, `(1/n^2) U^T U`.
    pub fn ij_cov(&self, queries: &QuerySet) -> Result<DMatrix<f64>> {
        let u = self.derivatives(queries)?;
        let n2 = (self.data.n() * self.data.n()) as f64;
        Ok(u.transpose() * &u / n2)
    }
}

/// Which fitted values the local residuals `D_k = Y_k - fhat(X_k)` use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualMode {
    /// Residuals against the full-forest prediction.
    #[default]
    FullForest,
    /// Residuals against the mean of members that did not draw row `k`.
    OutOfBag,
}

/// Out-of-bag in-leaf counts at one query point.
#[derive(Debug, Clone)]
pub struct LocalWeights {
    weights: Vec<f64>,
    total: f64,
}

impl LocalWeights {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total(&self) -> f64 {
        self.total
    }
}

fn check_forest(forest: &Ensemble<RegressionTree>, data: &Dataset) -> Result<()> {
    if forest.inbag().n() != data.n() {
        return Err(Error::Dimension(format!(
            "forest was fit on {} rows, data has {}",
            forest.inbag().n(),
            data.n()
        )));
    }
    Ok(())
}

/// Count, for each training row, the members where the row is out of bag
/// and falls in the same leaf as `x`.
pub fn oob_inleaf_weights(
    forest: &Ensemble<RegressionTree>,
    data: &Dataset,
    x: &[f64],
) -> Result<LocalWeights> {
    check_forest(forest, data)?;
    check_query_dim(data, x.len())?;
    let n = data.n();
    let inbag = forest.inbag();
    let mut weights = vec![0.0; n];
    for (b, tree) in forest.members().iter().enumerate() {
        let query_leaf = tree.leaf_id(x);
        for (k, w) in weights.iter_mut().enumerate() {
            if inbag.count(k, b) == 0 && tree.leaf_id_row(data, k) == query_leaf {
                *w += 1.0;
            }
        }
    }
    let total = weights.iter().sum();
    Ok(LocalWeights { weights, total })
}

fn residual(
    forest: &Ensemble<RegressionTree>,
    data: &Dataset,
    k: usize,
    mode: ResidualMode,
) -> Result<f64> {
    match mode {
        ResidualMode::FullForest => Ok(data.y()[k] - forest.predict_row(data, k)),
        ResidualMode::OutOfBag => {
            let inbag = forest.inbag();
            let mut sum = 0.0;
            let mut count = 0usize;
            for (b, tree) in forest.members().iter().enumerate() {
                if inbag.count(k, b) == 0 {
                    sum += tree.predict_row(data, k);
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::NoOobWeight);
            }
            Ok(data.y()[k] - sum / count as f64)
        }
    }
}

/// Local bias estimate at `x`: the weighted mean of residuals over rows
/// that are out of bag and in the query's leaf.
pub fn local_bias(
    forest: &Ensemble<RegressionTree>,
    data: &Dataset,
    x: &[f64],
    mode: ResidualMode,
) -> Result<f64> {
    let lw = oob_inleaf_weights(forest, data, x)?;
    if lw.total <= 0.0 {
        return Err(Error::EmptyNeighborhood);
    }
    let mut p = 0.0;
    for (k, &c) in lw.weights.iter().enumerate() {
        if c > 0.0 {
            p += c * residual(forest, data, k, mode)?;
        }
    }
    Ok(p / lw.total)
}

/// IJ derivative matrix of the bias estimate over the query points.
pub fn local_bias_derivatives(
    forest: &Ensemble<RegressionTree>,
    data: &Dataset,
    queries: &QuerySet,
    mode: ResidualMode,
) -> Result<DMatrix<f64>> {
    check_forest(forest, data)?;
    check_query_dim(data, queries.dim())?;
    let n = data.n();
    let mut resid: Vec<Option<f64>> = vec![None; n];
    let mut u = DMatrix::zeros(n, queries.len());
    for (j, x) in queries.rows().enumerate() {
        let lw = oob_inleaf_weights(forest, data, x)?;
        let q = lw.total;
        if q <= 0.0 {
            return Err(Error::EmptyNeighborhood);
        }
        let mut p = 0.0;
        for (k, &c) in lw.weights.iter().enumerate() {
            if c > 0.0 {
                let d = match resid[k] {
                    Some(d) => d,
                    None => {
                        let d = residual(forest, data, k, mode)?;
                        resid[k] = Some(d);
                        d
                    }
                };
                p += c * d;
            }
        }
        let q2 = q * q;
        for (k, &c) in lw.weights.iter().enumerate() {
            if c > 0.0 {
                let d = resid[k].expect("residual cached for weighted row");
                let r = n as f64 * c * d;
                let s = n as f64 * c;
                u[(k, j)] = (r * q - p * s) / q2;
            }
        }
    }
    Ok(u)
}

/// Per-query variance of a modified prediction from the two summed
/// derivative fields: `(1/n^2) sum_i (U_i + U'_i)^2`.
pub fn modified_variance(
    u_main: &DMatrix<f64>,
    u_bias: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    if u_main.shape() != u_bias.shape() {
        return Err(Error::Dimension(format!(
            "derivative fields have shapes {:?} and {:?}",
            u_main.shape(),
            u_bias.shape()
        )));
    }
    let (n, m) = u_main.shape();
    if n == 0 {
        return Err(Error::Empty("derivative field"));
    }
    let n2 = (n * n) as f64;
    Ok((0..m)
        .map(|j| (0..n).map(|i| (u_main[(i, j)] + u_bias[(i, j)]).powi(2)).sum::<f64>() / n2)
        .collect())
}

/// A forest with a local bias correction, caching the leaf table and
/// residuals so repeated queries stay cheap.
pub struct LocalModifier {
    forest: Ensemble<RegressionTree>,
    data: Dataset,
    mode: ResidualMode,
    /// Leaf of each training row in each member, member-major.
    leaf_ids: Vec<u32>,
    /// Residual `D_k` where defined; rows with no out-of-bag member stay
    /// `None` in out-of-bag mode and never carry weight.
    residuals: Vec<Option<f64>>,
}

impl LocalModifier {
    pub fn new(
        forest: Ensemble<RegressionTree>,
        data: Dataset,
        mode: ResidualMode,
    ) -> Result<Self> {
        check_forest(&forest, &data)?;
        let n = data.n();
        let b_count = forest.n_members();
        let mut leaf_ids = vec![0u32; n * b_count];
        for (b, tree) in forest.members().iter().enumerate() {
            for k in 0..n {
                leaf_ids[b * n + k] = tree.leaf_id_row(&data, k) as u32;
            }
        }
        let mut residuals = vec![None; n];
        for (k, slot) in residuals.iter_mut().enumerate() {
            match residual(&forest, &data, k, mode) {
                Ok(d) => *slot = Some(d),
                Err(Error::NoOobWeight) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(LocalModifier { forest, data, mode, leaf_ids, residuals })
    }

    pub fn forest(&self) -> &Ensemble<RegressionTree> {
        &self.forest
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn mode(&self) -> ResidualMode {
        self.mode
    }

    /// Out-of-bag in-leaf counts at `x`, from the cached leaf table.
    pub fn weights(&self, x: &[f64]) -> Result<LocalWeights> {
        check_query_dim(&self.data, x.len())?;
        let n = self.data.n();
        let inbag = self.forest.inbag();
        let mut weights = vec![0.0; n];
        for (b, tree) in self.forest.members().iter().enumerate() {
            let query_leaf = tree.leaf_id(x) as u32;
            let leaves = &self.leaf_ids[b * n..(b + 1) * n];
            for (k, w) in weights.iter_mut().enumerate() {
                if inbag.count(k, b) == 0 && leaves[k] == query_leaf {
                    *w += 1.0;
                }
            }
        }
        let total = weights.iter().sum();
        Ok(LocalWeights { weights, total })
    }

    pub fn bias(&self, x: &[f64]) -> Result<f64> {
        let lw = self.weights(x)?;
        if lw.total <= 0.0 {
            return Err(Error::EmptyNeighborhood);
        }
        let mut p = 0.0;
        for (k, &c) in lw.weights.iter().enumerate() {
            if c > 0.0 {
                p += c * self.residuals[k].ok_or(Error::NoOobWeight)?;
            }
        }
        Ok(p / lw.total)
    }

    /// Modified prediction: forest prediction plus local bias.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forest.predict(x) + self.bias(x)?)
    }

    pub fn predict_set(&self, queries: &QuerySet) -> Result<Vec<f64>> {
        queries.rows().map(|x| self.predict(x)).collect()
    }

    /// Derivative matrix of the bias term alone.
    pub fn bias_derivatives(&self, queries: &QuerySet) -> Result<DMatrix<f64>> {
        check_query_dim(&self.data, queries.dim())?;
        let n = self.data.n();
        let mut u = DMatrix::zeros(n, queries.len());
        for (j, x) in queries.rows().enumerate() {
            let lw = self.weights(x)?;
            let q = lw.total;
            if q <= 0.0 {
                return Err(Error::EmptyNeighborhood);
            }
            let mut p = 0.0;
            for (k, &c) in lw.weights.iter().enumerate() {
                if c > 0.0 {
                    p += c * self.residuals[k].ok_or(Error::NoOobWeight)?;
                }
            }
            let q2 = q * q;
            for (k, &c) in lw.weights.iter().enumerate() {
                if c > 0.0 {
                    let d = self.residuals[k].ok_or(Error::NoOobWeight)?;
                    let r = n as f64 * c * d;
                    let s = n as f64 * c;
                    u[(k, j)] = (r * q - p * s) / q2;
                }
            }
        }
        Ok(u)
    }

    /// Derivative matrix of the modified prediction: the forest's raw IJ
    /// field plus the bias field.
    pub fn derivatives(&self, queries: &QuerySet) -> Result<DMatrix<f64>> {
        let preds = self.forest.member_predictions(queries);
        let u_forest = raw_ij_derivatives(self.forest.inbag(), &preds)?;
        let u_bias = self.bias_derivatives(queries)?;
        Ok(u_forest + u_bias)
    }

    /// Per-query variance of the modified prediction.
    pub fn variances(&self, queries: &QuerySet) -> Result<Vec<f64>> {
        let preds = self.forest.member_predictions(queries);
        let u_forest = raw_ij_derivatives(self.forest.inbag(), &preds)?;
        let u_bias = self.bias_derivatives(queries)?;
        modified_variance(&u_forest, &u_bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, gen_queries, SeedSpec, SignalKind};
    use crate::ensemble::{fit_ensemble, EnsembleConfig};
    use crate::tree::{fit_tree, TreeConfig};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix as Mat, DVector};

    #[test]
    fn constant_response_is_reproduced_exactly() {
        let base = gen_dataset(SignalKind::Constant, 25, 3, SeedSpec::root(1)).unwrap();
        let data = base.with_response(DVector::from_element(25, 4.25)).unwrap();
        let spec = KernelSpec::new(KernelFn::Gaussian, 0.7).unwrap();
        let q = gen_queries(3, 3, SeedSpec::root(2)).unwrap();
        for x in q.rows() {
            assert_relative_eq!(
                nw_predict(&data, &spec, x).unwrap(),
                4.25,
                max_relative = 1e-12
            );
        }
        let u = nw_derivatives(&data, &spec, &q).unwrap();
        assert!(u.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn three_point_uniform_instance() {
        // Distances from 0 are (0.1, 0, 0.1), all inside h = 1, so the
        // weights are (1,1,1): prediction 1, derivatives n C_i (Y_i - 1)/q
        // = (-1,-1,2), variance (1/9)(1+1+4) = 2/3.
        let x = Mat::from_row_slice(3, 1, &[-0.1, 0.0, 0.1]);
        let y = DVector::from_vec(vec![0.0, 0.0, 3.0]);
        let data = Dataset::new(x, y).unwrap();
        let spec = KernelSpec::new(KernelFn::Uniform, 1.0).unwrap();
        assert_relative_eq!(nw_predict(&data, &spec, &[0.0]).unwrap(), 1.0);

        let q = QuerySet::single(&[0.0]).unwrap();
        let u = nw_derivatives(&data, &spec, &q).unwrap();
        assert_relative_eq!(u[(0, 0)], -1.0, max_relative = 1e-14);
        assert_relative_eq!(u[(1, 0)], -1.0, max_relative = 1e-14);
        assert_relative_eq!(u[(2, 0)], 2.0, max_relative = 1e-14);

        let nw = NadarayaWatson::fit(&data, spec).unwrap();
        let cov = nw.ij_cov(&q).unwrap();
        assert_relative_eq!(cov[(0, 0)], 2.0 / 3.0, max_relative = 1e-14);
    }

    #[test]
    fn derivatives_sum_to_zero() {
        let data = gen_dataset(SignalKind::Friedman, 50, 6, SeedSpec::root(7)).unwrap();
        let spec = KernelSpec::new(KernelFn::Gaussian, 0.8).unwrap();
        let q = gen_queries(4, 6, SeedSpec::root(8)).unwrap();
        let u = nw_derivatives(&data, &spec, &q).unwrap();
        for j in 0..4 {
            let total: f64 = (0..50).map(|i| u[(i, j)]).sum();
            let scale: f64 = (0..50).map(|i| u[(i, j)].abs()).sum();
            assert!(total.abs() <= 1e-10 * scale.max(1e-12));
        }
    }

    #[test]
    fn prediction_stays_inside_response_range() {
        let data = gen_dataset(SignalKind::Linear, 40, 4, SeedSpec::root(9)).unwrap();
        let spec = KernelSpec::new(KernelFn::Gaussian, 0.4).unwrap();
        let lo = data.y().min();
        let hi = data.y().max();
        let q = gen_queries(10, 4, SeedSpec::root(10)).unwrap();
        for x in q.rows() {
            let v = nw_predict(&data, &spec, x).unwrap();
            assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn empty_neighborhood_is_an_error() {
        let x = Mat::from_row_slice(2, 1, &[-0.5, -0.6]);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let data = Dataset::new(x, y).unwrap();
        let spec = KernelSpec::new(KernelFn::Uniform, 0.2).unwrap();
        assert!(matches!(
            nw_predict(&data, &spec, &[0.9]),
            Err(Error::EmptyNeighborhood)
        ));
        assert!(KernelSpec::new(KernelFn::Uniform, 0.0).is_err());
        assert!(nw_predict(&data, &spec, &[0.9, 0.1]).is_err());
    }

    fn small_forest(
        n: usize,
        b: usize,
        k: usize,
        seed: u64,
    ) -> (Dataset, Ensemble<RegressionTree>) {
        let data = gen_dataset(SignalKind::Friedman, n, 6, SeedSpec::root(seed)).unwrap();
        let cfg = EnsembleConfig { n_members: b, subsample: k };
        let ens = fit_ensemble(
            &data,
            &cfg,
            |d, counts, s| fit_tree(d, counts, &TreeConfig::default(), s),
            SeedSpec::root(seed).child(7),
        )
        .unwrap();
        (data, ens)
    }

    #[test]
    fn modifier_matches_free_functions() {
        let (data, forest) = small_forest(40, 25, 15, 61);
        let q = gen_queries(3, 6, SeedSpec::root(62)).unwrap();
        let modifier =
            LocalModifier::new(forest.clone(), data.clone(), ResidualMode::FullForest)
                .unwrap();
        for x in q.rows() {
            let lw_a = oob_inleaf_weights(&forest, &data, x).unwrap();
            let lw_b = modifier.weights(x).unwrap();
            assert_eq!(lw_a.weights(), lw_b.weights());
            let bias_a = local_bias(&forest, &data, x, ResidualMode::FullForest).unwrap();
            let bias_b = modifier.bias(x).unwrap();
            assert_relative_eq!(bias_a, bias_b, max_relative = 1e-12);
            assert_relative_eq!(
                modifier.predict(x).unwrap(),
                forest.predict(x) + bias_a,
                max_relative = 1e-12
            );
        }
        let u_a =
            local_bias_derivatives(&forest, &data, &q, ResidualMode::FullForest).unwrap();
        let u_b = modifier.bias_derivatives(&q).unwrap();
        assert_eq!(u_a, u_b);
    }

    #[test]
    fn bias_derivatives_sum_to_zero() {
        let (data, forest) = small_forest(35, 30, 12, 71);
        let q = gen_queries(2, 6, SeedSpec::root(72)).unwrap();
        let u = local_bias_derivatives(&forest, &data, &q, ResidualMode::FullForest).unwrap();
        for j in 0..2 {
            let total: f64 = (0..35).map(|i| u[(i, j)]).sum();
            let scale: f64 = (0..35).map(|i| u[(i, j)].abs()).sum();
            assert!(total.abs() <= 1e-10 * scale.max(1e-12));
        }
    }

    #[test]
    fn out_of_bag_residual_mode_works() {
        let (data, forest) = small_forest(30, 40, 10, 81);
        let modifier =
            LocalModifier::new(forest, data, ResidualMode::OutOfBag).unwrap();
        let q = gen_queries(2, 6, SeedSpec::root(82)).unwrap();
        let vars = modifier.variances(&q).unwrap();
        assert_eq!(vars.len(), 2);
        assert!(vars.iter().all(|v| v.is_finite() && *v >= 0.0));
        let preds = modifier.predict_set(&q).unwrap();
        assert!(preds.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn modified_variance_combines_fields() {
        let u1 = Mat::from_row_slice(2, 1, &[1.0, -1.0]);
        let u2 = Mat::from_row_slice(2, 1, &[0.5, -0.5]);
        let v = modified_variance(&u1, &u2).unwrap();
        assert_relative_eq!(v[0], (1.5f64.powi(2) * 2.0) / 4.0, max_relative = 1e-14);
        let bad = Mat::zeros(3, 1);
        assert!(modified_variance(&u1, &bad).is_err());
    }
}
