//! Coverage experiment: replicate datasets from one generative model, fit
//! every requested model on each, and measure how often the IJ confidence
//! interval at each query point captures the expectation of the estimate
//! (CoE) and the true signal (CoT).

use anyhow::{anyhow, Context, Result};
use ij_core::{gen_dataset, gen_queries, normal_quantile, QuerySet, SeedSpec};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::models::{fit_model, FitSettings, ModelSpec};

/// One line of coverage.csv.
#[derive(Debug, Clone)]
pub struct CoverageRow {
    pub model: String,
    pub query_index: usize,
    pub coe: f64,
    pub cot: f64,
    pub mean_width: f64,
}

/// What one model produced on one replicate.
#[derive(Debug, Clone)]
pub struct RepRecord {
    pub preds: Vec<f64>,
    /// Pointwise variance estimates; a negative or non-finite entry means
    /// no interval can be formed at that query.
    pub vars: Vec<f64>,
}

/// Failure counts for one model across a run.
#[derive(Debug, Clone)]
pub struct ModelFailures {
    pub model: String,
    pub fit_failures: usize,
    pub invalid_intervals: usize,
}

fn interval_ok(v: f64) -> bool {
    v.is_finite() && v >= 0.0
}

/// Reduce one model's per-replicate records to per-query coverage rows.
/// `None` records are fit failures; they contribute to no denominator.
pub fn aggregate(
    model: &str,
    truths: &[f64],
    records: &[Option<RepRecord>],
    z: f64,
) -> (Vec<CoverageRow>, ModelFailures) {
    let m = truths.len();
    let fitted: Vec<&RepRecord> = records.iter().flatten().collect();
    let fit_failures = records.len() - fitted.len();

    let mut rows = Vec::with_capacity(m);
    let mut invalid_intervals = 0usize;
    for j in 0..m {
        let mean_pred = if fitted.is_empty() {
            f64::NAN
        } else {
            fitted.iter().map(|r| r.preds[j]).sum::<f64>() / fitted.len() as f64
        };
        let mut valid = 0usize;
        let mut hit_mean = 0usize;
        let mut hit_truth = 0usize;
        let mut width_sum = 0.0;
        for r in &fitted {
            let v = r.vars[j];
            if !interval_ok(v) {
                invalid_intervals += 1;
                continue;
            }
            valid += 1;
            let half = z * v.sqrt();
            let (lo, hi) = (r.preds[j] - half, r.preds[j] + half);
            width_sum += 2.0 * half;
            if lo <= mean_pred && mean_pred <= hi {
                hit_mean += 1;
            }
            if lo <= truths[j] && truths[j] <= hi {
                hit_truth += 1;
            }
        }
        let (coe, cot, mean_width) = if valid == 0 {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            (
                hit_mean as f64 / valid as f64,
                hit_truth as f64 / valid as f64,
                width_sum / valid as f64,
            )
        };
        rows.push(CoverageRow {
            model: model.to_string(),
            query_index: j,
            coe,
            cot,
            mean_width,
        });
    }
    (rows, ModelFailures { model: model.to_string(), fit_failures, invalid_intervals })
}

/// Seed layout shared by the simulation commands: queries on child 1,
/// replicate data on child 2, model fits on child 3, held-out data on
/// child 4, row shuffles on child 5.
pub fn run_root(seed: u64) -> SeedSpec {
    SeedSpec::root(seed)
}

pub fn run_coverage(cfg: &RunConfig) -> Result<(Vec<CoverageRow>, Vec<ModelFailures>)> {
    let specs: Vec<ModelSpec> = cfg
        .models
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()
        .context("parsing model specs")?;
    let root = run_root(cfg.seed);
    let queries = gen_queries(cfg.queries, cfg.dim, root.child(1))?;
    let truths: Vec<f64> = queries
        .rows()
        .map(|x| cfg.signal.eval(x))
        .collect::<ij_core::Result<_>>()?;
    let z = normal_quantile(0.5 + cfg.level / 2.0)?;
    let st = FitSettings { trees: cfg.trees, subsample: cfg.subsample };

    let per_replicate: Vec<Vec<Option<RepRecord>>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| replicate(cfg, &specs, &queries, &st, root, r))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (mi, spec) in specs.iter().enumerate() {
        let records: Vec<Option<RepRecord>> =
            per_replicate.iter().map(|rep| rep[mi].clone()).collect();
        let (mut model_rows, fails) =
            aggregate(&spec.to_string(), &truths, &records, z);
        rows.append(&mut model_rows);
        failures.push(fails);
    }
    Ok((rows, failures))
}

fn replicate(
    cfg: &RunConfig,
    specs: &[ModelSpec],
    queries: &QuerySet,
    st: &FitSettings,
    root: SeedSpec,
    r: usize,
) -> Result<Vec<Option<RepRecord>>> {
    let data = gen_dataset(cfg.signal, cfg.n, cfg.dim, root.child(2).child(r as u64))
        .map_err(|e| anyhow!("replicate {r}: {e}"))?;
    let mut out = Vec::with_capacity(specs.len());
    for (mi, spec) in specs.iter().enumerate() {
        let seed = root.child(3).child(r as u64).child(mi as u64);
        let record = fit_model(spec, &data, st, seed).ok().and_then(|model| {
            let preds = model.predictions(queries).ok()?;
            let vars = match model.variances(queries, cfg.correction) {
                Ok(v) => v,
                // A failed variance estimate invalidates the intervals but
                // not the predictions; keep the fit with unusable widths.
                Err(_) => vec![f64::NAN; queries.len()],
            };
            Some(RepRecord { preds, vars })
        });
        out.push(record);
    }
    Ok(out)
}
