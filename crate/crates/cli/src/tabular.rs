//! CSV ingestion and the two tabular commands.
//!
//! Ingestion rules: the file must have a header row; any row with a
//! missing cell (empty or `NA`) is dropped; categorical columns expand to
//! one indicator per observed level, levels sorted lexicographically, in
//! the column's original position; every numeric feature is min-max scaled
//! to `[-1, 1]` (the model layer requires bounded covariates); the target
//! may optionally be log-transformed, which requires it to be positive.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ij_core::{
    compare_fitted, confidence_interval, Dataset, Error, QuerySet, SeedSpec,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::config::RunConfig;
use crate::coverage::run_root;
use crate::models::{fit_model, FitSettings, ModelSpec};
use crate::power::MAX_COMPARISON_QUERIES;

/// How to read one CSV file.
#[derive(Debug, Clone)]
pub struct TabularSchema {
    pub target: String,
    pub log_target: bool,
    pub categorical: Vec<String>,
}

/// The ingested design.
#[derive(Debug, Clone)]
pub struct TabularData {
    pub data: Dataset,
    pub feature_names: Vec<String>,
    pub dropped_rows: usize,
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t == "NA"
}

pub fn ingest_csv(path: &Path, schema: &TabularSchema) -> Result<TabularData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers: Vec<String> =
        reader.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let target_col = headers
        .iter()
        .position(|h| *h == schema.target)
        .ok_or_else(|| anyhow!("target column {:?} not found", schema.target))?;
    for c in &schema.categorical {
        if !headers.contains(c) {
            bail!("categorical column {c:?} not found");
        }
        if *c == schema.target {
            bail!("target column {c:?} cannot be categorical");
        }
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut dropped_rows = 0usize;
    for record in reader.records() {
        let record = record?;
        if record.len() != headers.len() {
            bail!("row {} has {} cells, header has {}", rows.len() + dropped_rows + 2,
                  record.len(), headers.len());
        }
        if record.iter().any(is_missing) {
            dropped_rows += 1;
            continue;
        }
        rows.push(record.iter().map(|c| c.trim().to_string()).collect());
    }
    if rows.is_empty() {
        bail!("no complete rows left after dropping {} incomplete ones", dropped_rows);
    }
    let n = rows.len();

    let mut y = DVector::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        let raw: f64 = row[target_col]
            .parse()
            .map_err(|_| anyhow!("target {:?} is not numeric", row[target_col]))?;
        y[i] = if schema.log_target {
            if raw <= 0.0 {
                bail!("log target requires positive values, found {raw}");
            }
            raw.ln()
        } else {
            raw
        };
    }

    // Expand columns in their original order.
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for (c, name) in headers.iter().enumerate() {
        if c == target_col {
            continue;
        }
        if schema.categorical.contains(name) {
            let levels: BTreeSet<&str> =
                rows.iter().map(|row| row[c].as_str()).collect();
            for level in levels {
                let vals: Vec<f64> = rows
                    .iter()
                    .map(|row| if row[c] == level { 1.0 } else { 0.0 })
                    .collect();
                columns.push((format!("{name}={level}"), vals));
            }
        } else {
            let mut vals = Vec::with_capacity(n);
            for row in &rows {
                let v: f64 = row[c].parse().map_err(|_| {
                    anyhow!("column {name:?} has non-numeric cell {:?}", row[c])
                })?;
                vals.push(v);
            }
            columns.push((name.clone(), vals));
        }
    }
    if columns.is_empty() {
        bail!("no feature columns besides the target");
    }

    // Min-max scale every feature to [-1, 1]; constant columns become 0.
    let d = columns.len();
    let mut x = DMatrix::zeros(n, d);
    let mut feature_names = Vec::with_capacity(d);
    for (j, (name, vals)) in columns.into_iter().enumerate() {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (i, v) in vals.into_iter().enumerate() {
            x[(i, j)] = if hi > lo { 2.0 * (v - lo) / (hi - lo) - 1.0 } else { 0.0 };
        }
        feature_names.push(name);
    }

    Ok(TabularData { data: Dataset::new(x, y)?, feature_names, dropped_rows })
}

/// Deterministic train/query split: shuffle row indices with the run's
/// seed stream, hold out the first `k` rows as query points.
pub fn holdout_split(
    table: &TabularData,
    k: usize,
    root: SeedSpec,
) -> Result<(Dataset, QuerySet, Vec<f64>)> {
    let n = table.data.n();
    if k == 0 {
        bail!("need at least one query row");
    }
    if n < k + 2 {
        bail!("{n} rows cannot supply {k} query rows plus a training set");
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = root.child(5).rng();
    for i in (1..n).rev() {
        indices.swap(i, rng.gen_range(0..=i));
    }
    let (held, train) = indices.split_at(k);

    let d = table.data.dim();
    let mut qdata = Vec::with_capacity(k * d);
    let mut actual = Vec::with_capacity(k);
    for &i in held {
        qdata.extend(table.data.row(i));
        actual.push(table.data.y()[i]);
    }
    let queries = QuerySet::new(qdata, k, d)?;

    let mut x = DMatrix::zeros(train.len(), d);
    let mut y = DVector::zeros(train.len());
    for (r, &i) in train.iter().enumerate() {
        for c in 0..d {
            x[(r, c)] = table.data.xv(i, c);
        }
        y[r] = table.data.y()[i];
    }
    Ok((Dataset::new(x, y)?, queries, actual))
}

/// One line of predictions.csv.
#[derive(Debug, Clone)]
pub struct PredictionRow {
    pub model: String,
    pub query_index: usize,
    pub prediction: f64,
    pub variance: f64,
    pub lo: f64,
    pub hi: f64,
    pub actual: f64,
}

pub fn run_fit_csv(
    cfg: &RunConfig,
    table: &TabularData,
) -> Result<Vec<PredictionRow>> {
    let specs: Vec<ModelSpec> = cfg
        .models
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()
        .context("parsing model specs")?;
    let root = run_root(cfg.seed);
    let (train, queries, actual) = holdout_split(table, cfg.queries, root)?;
    let st = FitSettings { trees: cfg.trees, subsample: cfg.subsample };

    let mut rows = Vec::new();
    for (mi, spec) in specs.iter().enumerate() {
        let model = fit_model(spec, &train, &st, root.child(3).child(mi as u64))
            .map_err(|e| anyhow::Error::new(e).context(format!("fitting {spec}")))?;
        let preds = model.predictions(&queries)?;
        let vars = model.variances(&queries, cfg.correction)?;
        for j in 0..queries.len() {
            let (lo, hi) = if vars[j].is_finite() && vars[j] >= 0.0 {
                confidence_interval(preds[j], vars[j], cfg.level)?
            } else {
                (f64::NAN, f64::NAN)
            };
            rows.push(PredictionRow {
                model: spec.to_string(),
                query_index: j,
                prediction: preds[j],
                variance: vars[j],
                lo,
                hi,
                actual: actual[j],
            });
        }
    }
    Ok(rows)
}

/// One line of comparison.csv.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub model_a: String,
    pub model_b: String,
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub condition_number: f64,
}

pub fn run_compare_csv(
    cfg: &RunConfig,
    table: &TabularData,
) -> Result<ComparisonRow> {
    if cfg.models.len() != 2 {
        bail!("compare-csv needs exactly two models, got {}", cfg.models.len());
    }
    if cfg.queries > MAX_COMPARISON_QUERIES {
        bail!(
            "comparisons support at most {MAX_COMPARISON_QUERIES} query points, got {}",
            cfg.queries
        );
    }
    let a: ModelSpec = cfg.models[0].parse()?;
    let b: ModelSpec = cfg.models[1].parse()?;
    let root = run_root(cfg.seed);
    let (train, queries, _) = holdout_split(table, cfg.queries, root)?;
    let st = FitSettings { trees: cfg.trees, subsample: cfg.subsample };

    let ma = fit_model(&a, &train, &st, root.child(3).child(0))
        .map_err(|e| anyhow::Error::new(e).context(format!("fitting {a}")))?;
    let mb = fit_model(&b, &train, &st, root.child(3).child(1))
        .map_err(|e| anyhow::Error::new(e).context(format!("fitting {b}")))?;
    let r = compare_fitted(&ma, &mb, &queries).map_err(|e| {
        let hint = match e {
            Error::SingularCovariance { .. } => {
                "comparison covariance is singular; fewer query points or \
                 larger ensembles may help"
            }
            _ => "comparing the fitted models",
        };
        anyhow::Error::new(e).context(hint)
    })?;
    Ok(ComparisonRow {
        model_a: a.to_string(),
        model_b: b.to_string(),
        statistic: r.statistic,
        df: r.df,
        p_value: r.p_value,
        condition_number: r.condition_number,
    })
}
