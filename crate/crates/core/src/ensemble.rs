//! Subsampled ensembles and their infinitesimal jackknife derivatives.
//!
//! An ensemble draws, for each member, a subsample of size `k` with
//! replacement from the training rows (recorded as an inbag count matrix)
//! and fits one member model to that multiset. The IJ directional derivative
//! of the ensemble prediction with respect to training row `i` is
//!
//! ```text
//! U_i(x) = n * cov_b(N_{i,b}, T_b(x))
//! ```
//!
//! the covariance over members between row `i`'s inbag count and the member
//! predictions, with the 1/B population convention. At finite `B` the plug-in
//! variance `(1/n^2) sum_i U_i(x)^2` carries Monte Carlo noise, so two
//! corrections are provided: the ranger-style bias subtraction and the
//! V-statistics ANOVA estimator, which treats member predictions grouped by
//! the rows they drew.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::data::{Dataset, QuerySet, SeedSpec};
use crate::error::{Error, Result};
use crate::gbt::GbtModel;
use crate::tree::RegressionTree;

#[derive(Debug, Clone, Copy)]
pub struct EnsembleConfig {
    pub n_members: usize,
    /// Subsample size `k`; draws are with replacement.
    pub subsample: usize,
}

impl EnsembleConfig {
    fn validate(&self) -> Result<()> {
        if self.n_members == 0 {
            return Err(Error::InvalidArgument("n_members must be >= 1".into()));
        }
        if self.subsample == 0 {
            return Err(Error::InvalidArgument("subsample must be >= 1".into()));
        }
        Ok(())
    }
}

/// Inbag counts `N_{i,b}` stored member-major; every column sums to the
/// subsample size.
#[derive(Debug, Clone)]
pub struct InbagMatrix {
    counts: Vec<u32>,
    n: usize,
    members: usize,
    subsample: u64,
}

impl InbagMatrix {
    /// Build from member-major counts (`counts[b * n + i]` is `N_{i,b}`),
    /// validating that all column sums agree.
    pub fn from_counts(n: usize, members: usize, counts: Vec<u32>) -> Result<Self> {
        if n == 0 || members == 0 || counts.len() != n * members {
            return Err(Error::Dimension(format!(
                "inbag buffer holds {} entries, expected {n}x{members}",
                counts.len()
            )));
        }
        let first: u64 = counts[..n].iter().map(|&c| u64::from(c)).sum();
        if first == 0 {
            return Err(Error::Empty("inbag column"));
        }
        for b in 1..members {
            let sum: u64 = counts[b * n..(b + 1) * n].iter().map(|&c| u64::from(c)).sum();
            if sum != first {
                return Err(Error::InvalidArgument(format!(
                    "inbag column {b} sums to {sum}, expected {first}"
                )));
            }
        }
        Ok(InbagMatrix { counts, n, members, subsample: first })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn subsample(&self) -> u64 {
        self.subsample
    }

    #[inline]
    pub fn count(&self, row: usize, member: usize) -> u32 {
        self.counts[member * self.n + row]
    }

    /// Counts for one member, indexed by row.
    #[inline]
    pub fn member(&self, member: usize) -> &[u32] {
        &self.counts[member * self.n..(member + 1) * self.n]
    }

    /// Row totals `N_i = sum_b N_{i,b}`.
    pub fn row_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.n];
        for b in 0..self.members {
            for (i, &c) in self.member(b).iter().enumerate() {
                totals[i] += u64::from(c);
            }
        }
        totals
    }

    /// Mean inbag count per row, `sum_b N_{i,b} / B`.
    fn row_means(&self) -> Vec<f64> {
        self.row_totals().iter().map(|&t| t as f64 / self.members as f64).collect()
    }
}

/// Anything an ensemble can hold as a member.
pub trait Predictor: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;
    fn predict_row(&self, data: &Dataset, row: usize) -> f64;
}

impl Predictor for RegressionTree {
    fn predict(&self, x: &[f64]) -> f64 {
        RegressionTree::predict(self, x)
    }

    fn predict_row(&self, data: &Dataset, row: usize) -> f64 {
        RegressionTree::predict_row(self, data, row)
    }
}

impl Predictor for GbtModel {
    fn predict(&self, x: &[f64]) -> f64 {
        GbtModel::predict(self, x)
    }

    fn predict_row(&self, data: &Dataset, row: usize) -> f64 {
        GbtModel::predict_row(self, data, row)
    }
}

/// A fitted subsampled ensemble: member models plus the inbag record that
/// the IJ computations need.
#[derive(Debug, Clone)]
pub struct Ensemble<M> {
    members: Vec<M>,
    inbag: InbagMatrix,
}

/// Fit an ensemble. Every member gets its own seed stream derived from
/// `seed`, one for the subsample draw and one for the fitter, so the result
/// is identical however the member loop is scheduled.
pub fn fit_ensemble<M, F>(
    data: &Dataset,
    cfg: &EnsembleConfig,
    fitter: F,
    seed: SeedSpec,
) -> Result<Ensemble<M>>
where
    M: Send,
    F: Fn(&Dataset, &[u32], SeedSpec) -> Result<M> + Sync,
{
    cfg.validate()?;
    let n = data.n();
    let fitted: Vec<(Vec<u32>, M)> = (0..cfg.n_members)
        .into_par_iter()
        .map(|b| {
            let member_seed = seed.child(b as u64);
            let mut rng = member_seed.child(0).rng();
            let mut counts = vec![0u32; n];
            for _ in 0..cfg.subsample {
                counts[rng.gen_range(0..n)] += 1;
            }
            let model = fitter(data, &counts, member_seed.child(1))?;
            Ok((counts, model))
        })
        .collect::<Result<_>>()?;

    let mut counts = Vec::with_capacity(n * cfg.n_members);
    let mut members = Vec::with_capacity(cfg.n_members);
    for (c, m) in fitted {
        counts.extend_from_slice(&c);
        members.push(m);
    }
    let inbag = InbagMatrix::from_counts(n, cfg.n_members, counts)?;
    Ok(Ensemble { members, inbag })
}

impl<M> Ensemble<M> {
    pub fn members(&self) -> &[M] {
        &self.members
    }

    pub fn inbag(&self) -> &InbagMatrix {
        &self.inbag
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }
}

impl<M: Predictor> Ensemble<M> {
    /// Ensemble prediction: the plain mean over members.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.members.iter().map(|m| m.predict(x)).sum::<f64>() / self.members.len() as f64
    }

    pub(crate) fn predict_row(&self, data: &Dataset, row: usize) -> f64 {
        self.members.iter().map(|m| m.predict_row(data, row)).sum::<f64>()
            / self.members.len() as f64
    }

    /// Member-by-query prediction matrix at the query points.
    pub fn member_predictions(&self, queries: &QuerySet) -> MemberPredictions {
        let m = queries.len();
        let b_count = self.members.len();
        let rows: Vec<Vec<f64>> = self
            .members
            .par_iter()
            .map(|member| queries.rows().map(|x| member.predict(x)).collect())
            .collect();
        let mut data = vec![0.0; b_count * m];
        for (b, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                data[j * b_count + b] = v;
            }
        }
        MemberPredictions { data, members: b_count, queries: m }
    }

    /// Ensemble predictions at the query points.
    pub fn predict_set(&self, queries: &QuerySet) -> Vec<f64> {
        let preds = self.member_predictions(queries);
        (0..queries.len()).map(|j| mean(preds.query(j))).collect()
    }

    /// Population variance of member predictions at one point.
    pub fn between_member_variance_at(&self, x: &[f64]) -> f64 {
        let vals: Vec<f64> = self.members.iter().map(|m| m.predict(x)).collect();
        population_variance(&vals)
    }
}

/// Member predictions at fixed query points, stored query-major so each
/// query's `B` values are contiguous.
#[derive(Debug, Clone)]
pub struct MemberPredictions {
    data: Vec<f64>,
    members: usize,
    queries: usize,
}

impl MemberPredictions {
    /// Build from row-major values (`values[b * queries + j]`).
    pub fn from_row_major(members: usize, queries: usize, values: Vec<f64>) -> Result<Self> {
        if members == 0 || queries == 0 || values.len() != members * queries {
            return Err(Error::Dimension(format!(
                "prediction buffer holds {} values, expected {members}x{queries}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("member predictions"));
        }
        let mut data = vec![0.0; members * queries];
        for b in 0..members {
            for j in 0..queries {
                data[j * members + b] = values[b * queries + j];
            }
        }
        Ok(MemberPredictions { data, members, queries })
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    #[inline]
    pub fn value(&self, member: usize, query: usize) -> f64 {
        self.data[query * self.members + member]
    }

    /// All member predictions at one query.
    #[inline]
    pub fn query(&self, query: usize) -> &[f64] {
        &self.data[query * self.members..(query + 1) * self.members]
    }

    /// Columns centered by their member means, query-major like `data`.
    fn centered(&self) -> Vec<f64> {
        let mut out = self.data.clone();
        for j in 0..self.queries {
            let col = &mut out[j * self.members..(j + 1) * self.members];
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            for v in col.iter_mut() {
                *v -= mean;
            }
        }
        out
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64
}

/// Population variance of member predictions at one query index.
pub fn between_member_variance(preds: &MemberPredictions, query: usize) -> f64 {
    population_variance(preds.query(query))
}

fn check_pair(inbag: &InbagMatrix, preds: &MemberPredictions) -> Result<()> {
    if inbag.members() != preds.members() {
        return Err(Error::Dimension(format!(
            "{} inbag columns vs {} prediction rows",
            inbag.members(),
            preds.members()
        )));
    }
    Ok(())
}

/// Raw IJ derivative field: the `n x m` matrix `U_{i,j} = n * cov_b(N_{i,b},
/// T_b(x_j))`.
pub fn raw_ij_derivatives(
    inbag: &InbagMatrix,
    preds: &MemberPredictions,
) -> Result<DMatrix<f64>> {
    check_pair(inbag, preds)?;
    let n = inbag.n();
    let b_count = inbag.members();
    let m = preds.queries();
    let nbar = inbag.row_means();
    let centered = preds.centered();
    // Residual column sums are ~0 after centering; kept for exactness.
    let resid: Vec<f64> = (0..m)
        .map(|j| centered[j * b_count..(j + 1) * b_count].iter().sum::<f64>())
        .collect();

    let mut u = DMatrix::zeros(n, m);
    for b in 0..b_count {
        let row = inbag.member(b);
        for (i, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let c = f64::from(c);
            for j in 0..m {
                u[(i, j)] += c * centered[j * b_count + b];
            }
        }
    }
    let scale = n as f64 / b_count as f64;
    for j in 0..m {
        for i in 0..n {
            u[(i, j)] = scale * (u[(i, j)] - nbar[i] * resid[j]);
        }
    }
    Ok(u)
}

/// Ranger-style corrected covariance matrix over the query points:
/// the raw IJ Gram matrix minus `(1/B)(sum_i var_b(N_{i,b}) - 1)` times the
/// between-member covariance of the predictions. Entries (including
/// variances) can come out negative at small `B`; interval construction
/// must reject those.
pub fn ranger_corrected_cov(
    inbag: &InbagMatrix,
    preds: &MemberPredictions,
) -> Result<DMatrix<f64>> {
    check_pair(inbag, preds)?;
    let n = inbag.n();
    let b_count = inbag.members();
    let m = preds.queries();
    let u = raw_ij_derivatives(inbag, preds)?;
    let centered = preds.centered();

    let mut sq = vec![0u64; n];
    for b in 0..b_count {
        for (i, &c) in inbag.member(b).iter().enumerate() {
            sq[i] += u64::from(c) * u64::from(c);
        }
    }
    let nbar = inbag.row_means();
    let sum_var_n: f64 = (0..n)
        .map(|i| sq[i] as f64 / b_count as f64 - nbar[i] * nbar[i])
        .sum();
    let factor = (sum_var_n - 1.0) / b_count as f64;

    let mut out = DMatrix::zeros(m, m);
    let inv_n2 = 1.0 / (n as f64 * n as f64);
    for j1 in 0..m {
        for j2 in j1..m {
            let first = inv_n2
                * (0..n).map(|i| u[(i, j1)] * u[(i, j2)]).sum::<f64>();
            let c1 = &centered[j1 * b_count..(j1 + 1) * b_count];
            let c2 = &centered[j2 * b_count..(j2 + 1) * b_count];
            let cov_t = c1.iter().zip(c2).map(|(a, b)| a * b).sum::<f64>() / b_count as f64;
            let value = first - factor * cov_t;
            out[(j1, j2)] = value;
            out[(j2, j1)] = value;
        }
    }
    Ok(out)
}

/// V-statistics ANOVA-corrected covariance matrix over the query points.
///
/// The ANOVA sums estimate the per-draw variance component: the variance
/// sigma_tau^2 of the expected member prediction given that one of its k
/// draws picked row i. The ensemble mean aggregates k draws from n rows,
/// so its infinite-ensemble IJ covariance is (k^2/n) * sigma_tau^2; the
/// returned matrix carries that calibration and is free of the
/// Monte-Carlo inflation the raw Gram suffers at finite `B`.
///
/// Requires `C = sum_i N_i > n` and a non-degenerate denominator
/// `C - sum_i N_i^2 / C`. Rows never drawn by any member get `m_i = 0` and
/// carry no weight.
pub fn vstat_corrected_cov(
    inbag: &InbagMatrix,
    preds: &MemberPredictions,
) -> Result<DMatrix<f64>> {
    check_pair(inbag, preds)?;
    let n = inbag.n();
    let b_count = inbag.members();
    let m = preds.queries();
    let totals = inbag.row_totals();
    let c_total: f64 = totals.iter().map(|&t| t as f64).sum();
    if c_total <= n as f64 {
        return Err(Error::Degenerate(format!(
            "total inbag count {c_total} must exceed n = {n}"
        )));
    }
    let denom = c_total - totals.iter().map(|&t| (t as f64) * (t as f64)).sum::<f64>() / c_total;
    if denom.abs() <= 1e-12 * c_total {
        return Err(Error::Degenerate(
            "inbag counts are concentrated on too few rows".into(),
        ));
    }

    // Group means m_i(x_j) = sum_b N_{i,b} T_b(x_j) / N_i, zero for rows
    // never drawn. Those zeros still enter the unweighted grand mean, so
    // the estimator is deliberately evaluated on the raw predictions: a
    // shift of T changes the answer whenever some row is undrawn.
    let mut mi: DMatrix<f64> = DMatrix::zeros(n, m);
    for b in 0..b_count {
        for (i, &c) in inbag.member(b).iter().enumerate() {
            if c == 0 {
                continue;
            }
            let c = f64::from(c);
            for j in 0..m {
                mi[(i, j)] += c * preds.value(b, j);
            }
        }
    }
    for i in 0..n {
        if totals[i] > 0 {
            let inv = 1.0 / totals[i] as f64;
            for j in 0..m {
                mi[(i, j)] *= inv;
            }
        }
    }
    let mbar: Vec<f64> =
        (0..m).map(|j| (0..n).map(|i| mi[(i, j)]).sum::<f64>() / n as f64).collect();

    let k = inbag.subsample() as f64;
    let scale = k * k / n as f64;
    let mut out = DMatrix::zeros(m, m);
    for j1 in 0..m {
        for j2 in j1..m {
            let mut ss_tau = 0.0;
            let mut group = 0.0;
            for i in 0..n {
                let w = totals[i] as f64;
                ss_tau += w * (mi[(i, j1)] - mbar[j1]) * (mi[(i, j2)] - mbar[j2]);
                group += w * mi[(i, j1)] * mi[(i, j2)];
            }
            let c1 = preds.query(j1);
            let c2 = preds.query(j2);
            let cross: f64 = c1.iter().zip(c2).map(|(a, b)| a * b).sum();
            // sum_i sum_b N_{i,b} (T_b - m_i)(T_b' - m_i') collapses to
            // k * sum_b T_b T_b' - sum_i N_i m_i m_i'.
            let ss_eps = k * cross - group;
            let sigma_eps = ss_eps / (c_total - n as f64);
            let component = (ss_tau - (n as f64 - 1.0) * sigma_eps) / denom;
            out[(j1, j2)] = scale * component;
            out[(j2, j1)] = scale * component;
        }
    }
    Ok(out)
}
