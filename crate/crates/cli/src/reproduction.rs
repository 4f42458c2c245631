//! Reproduction experiment: fit each model on several disjoint training
//! sets, form reproduction intervals from each fit, and measure how often
//! the other fits' predictions land inside them. A held-out test set gives
//! a per-split mean squared error alongside.

use anyhow::{anyhow, Context, Result};
use ij_core::{
    gen_dataset, gen_queries, reproduction_interval, PredictiveModel, QuerySet, SeedSpec,
};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::coverage::run_root;
use crate::models::{fit_model, FitSettings, ModelSpec};

/// One line of reproduction.csv.
#[derive(Debug, Clone)]
pub struct ReproductionRow {
    pub model: String,
    pub query_index: usize,
    pub cor: f64,
}

/// One line of mse.csv.
#[derive(Debug, Clone)]
pub struct MseRow {
    pub model: String,
    pub split_index: usize,
    pub mse: f64,
}

/// Failure counts for one model across all splits.
#[derive(Debug, Clone)]
pub struct SplitFailures {
    pub model: String,
    pub fit_failures: usize,
    pub invalid_intervals: usize,
}

#[derive(Debug, Clone)]
struct SplitFit {
    preds: Vec<f64>,
    vars: Vec<f64>,
    mse: f64,
}

/// Coverage of reproduction: over ordered pairs of distinct splits
/// `(i, k)`, how often split `k`'s prediction falls in split `i`'s
/// reproduction interval. Pairs where split `i` has no usable interval are
/// excluded from the denominator.
pub fn coverage_of_reproduction(
    intervals: &[Option<(f64, f64)>],
    preds: &[f64],
) -> f64 {
    let s = intervals.len();
    let mut hits = 0usize;
    let mut pairs = 0usize;
    for i in 0..s {
        let Some((lo, hi)) = intervals[i] else { continue };
        for (k, p) in preds.iter().enumerate() {
            if k == i {
                continue;
            }
            pairs += 1;
            if lo <= *p && *p <= hi {
                hits += 1;
            }
        }
    }
    if pairs == 0 {
        f64::NAN
    } else {
        hits as f64 / pairs as f64
    }
}

pub fn run_reproduction(
    cfg: &RunConfig,
) -> Result<(Vec<ReproductionRow>, Vec<MseRow>, Vec<SplitFailures>)> {
    let specs: Vec<ModelSpec> = cfg
        .models
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()
        .context("parsing model specs")?;
    let root = run_root(cfg.seed);
    let queries = gen_queries(cfg.queries, cfg.dim, root.child(1))?;
    let test = gen_dataset(cfg.signal, cfg.n, cfg.dim, root.child(4))?;
    let st = FitSettings { trees: cfg.trees, subsample: cfg.subsample };

    let per_split: Vec<Vec<Option<SplitFit>>> = (0..cfg.splits)
        .into_par_iter()
        .map(|s| split_fits(cfg, &specs, &queries, &test, &st, root, s))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut mse_rows = Vec::new();
    let mut failures = Vec::new();
    for (mi, spec) in specs.iter().enumerate() {
        let name = spec.to_string();
        let fits: Vec<&Option<SplitFit>> =
            per_split.iter().map(|sp| &sp[mi]).collect();
        let fitted: Vec<&SplitFit> = fits.iter().filter_map(|f| f.as_ref()).collect();
        let fit_failures = fits.len() - fitted.len();

        for (s, fit) in per_split.iter().enumerate() {
            if let Some(f) = &fit[mi] {
                mse_rows.push(MseRow {
                    model: name.clone(),
                    split_index: s,
                    mse: f.mse,
                });
            }
        }

        let mut invalid_intervals = 0usize;
        for j in 0..queries.len() {
            let preds: Vec<f64> = fitted.iter().map(|f| f.preds[j]).collect();
            let intervals: Vec<Option<(f64, f64)>> = fitted
                .iter()
                .map(|f| {
                    let v = f.vars[j];
                    if !v.is_finite() || v < 0.0 {
                        invalid_intervals += 1;
                        return None;
                    }
                    reproduction_interval(f.preds[j], v, cfg.level).ok()
                })
                .collect();
            rows.push(ReproductionRow {
                model: name.clone(),
                query_index: j,
                cor: coverage_of_reproduction(&intervals, &preds),
            });
        }
        failures.push(SplitFailures { model: name, fit_failures, invalid_intervals });
    }
    Ok((rows, mse_rows, failures))
}

fn split_fits(
    cfg: &RunConfig,
    specs: &[ModelSpec],
    queries: &QuerySet,
    test: &ij_core::Dataset,
    st: &FitSettings,
    root: SeedSpec,
    s: usize,
) -> Result<Vec<Option<SplitFit>>> {
    let data = gen_dataset(cfg.signal, cfg.n, cfg.dim, root.child(2).child(s as u64))
        .map_err(|e| anyhow!("split {s}: {e}"))?;
    let mut out = Vec::with_capacity(specs.len());
    for (mi, spec) in specs.iter().enumerate() {
        let seed = root.child(3).child(s as u64).child(mi as u64);
        let fit = fit_model(spec, &data, st, seed).ok().and_then(|model| {
            let preds = model.predictions(queries).ok()?;
            let vars = match model.variances(queries, cfg.correction) {
                Ok(v) => v,
                Err(_) => vec![f64::NAN; queries.len()],
            };
            let mut se = 0.0;
            for i in 0..test.n() {
                let p = model.eval_row(test, i).ok()?;
                let d = test.y()[i] - p;
                se += d * d;
            }
            Some(SplitFit { preds, vars, mse: se / test.n() as f64 })
        });
        out.push(fit);
    }
    Ok(out)
}
