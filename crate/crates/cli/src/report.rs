//! Output files: fixed-header CSVs and a manifest that echoes the
//! effective configuration. Every value is written deterministically, so
//! identical configurations produce byte-identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::coverage::{CoverageRow, ModelFailures};
use crate::power::{PowerRow, TestFailures};
use crate::reproduction::{MseRow, ReproductionRow, SplitFailures};
use crate::tabular::{ComparisonRow, PredictionRow};

/// Canonical float formatting: shortest round-trip decimal.
fn fmt(v: f64) -> String {
    format!("{v}")
}

fn open(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn write_coverage(path: &Path, rows: &[CoverageRow]) -> Result<()> {
    let mut w = open(path)?;
    writeln!(w, "model,query_index,coe,cot,mean_width")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.model,
            r.query_index,
            fmt(r.coe),
            fmt(r.cot),
            fmt(r.mean_width)
        )?;
    }
    Ok(w.flush()?)
}

pub fn write_power(path: &Path, rows: &[PowerRow]) -> Result<()> {
    let mut w = open(path)?;
    writeln!(w, "model_a,model_b,power,n_singular")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.model_a, r.model_b, fmt(r.power), r.n_singular)?;
    }
    Ok(w.flush()?)
}

pub fn write_reproduction(path: &Path, rows: &[ReproductionRow]) -> Result<()> {
    let mut w = open(path)?;
    writeln!(w, "model,query_index,cor")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.model, r.query_index, fmt(r.cor))?;
    }
    Ok(w.flush()?)
}

pub fn write_mse(path: &Path, rows: &[MseRow]) -> Result<()> {
    let mut w = open(path)?;
    writeln!(w, "model,split_index,mse")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.model, r.split_index, fmt(r.mse))?;
    }
    Ok(w.flush()?)
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = open(path)?;
    writeln!(w, "model,query_index,prediction,variance,lo,hi,actual")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.model,
            r.query_index,
            fmt(r.prediction),
            fmt(r.variance),
            fmt(r.lo),
            fmt(r.hi),
            fmt(r.actual)
        )?;
    }
    Ok(w.flush()?)
}

pub fn write_comparison(path: &Path, row: &ComparisonRow) -> Result<()> {
    let mut w = open(path)?;
    writeln!(w, "model_a,model_b,statistic,df,p_value,condition_number")?;
    writeln!(
        w,
        "{},{},{},{},{},{}",
        row.model_a,
        row.model_b,
        fmt(row.statistic),
        row.df,
        fmt(row.p_value),
        fmt(row.condition_number)
    )?;
    Ok(w.flush()?)
}

/// Per-model failure counts, keyed for the manifest.
#[derive(Debug, Clone, Default, Serialize)]
pub struct FailureCounts {
    pub fit_failures: usize,
    pub invalid_intervals: usize,
    pub singular: usize,
}

/// The manifest: effective configuration, seeds, failure counts, and
/// package versions. Deliberately free of timestamps so reruns match.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub signal: String,
    pub n: usize,
    pub dim: usize,
    pub replicates: usize,
    pub queries: usize,
    pub trees: usize,
    pub subsample: usize,
    pub splits: usize,
    pub seed: u64,
    pub correction: String,
    pub level: f64,
    pub models: Vec<String>,
    pub failures: BTreeMap<String, FailureCounts>,
    pub versions: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let mut versions = BTreeMap::new();
        let v = env!("CARGO_PKG_VERSION").to_string();
        versions.insert("ij-cli".to_string(), v.clone());
        versions.insert("ij-core".to_string(), v);
        Manifest {
            command: command.to_string(),
            signal: format!("{:?}", cfg.signal).to_lowercase(),
            n: cfg.n,
            dim: cfg.dim,
            replicates: cfg.replicates,
            queries: cfg.queries,
            trees: cfg.trees,
            subsample: cfg.subsample,
            splits: cfg.splits,
            seed: cfg.seed,
            correction: cfg.correction.to_string(),
            level: cfg.level,
            models: cfg.models.clone(),
            failures: BTreeMap::new(),
            versions,
        }
    }

    pub fn with_coverage_failures(mut self, fails: &[ModelFailures]) -> Self {
        for f in fails {
            self.failures.insert(
                f.model.clone(),
                FailureCounts {
                    fit_failures: f.fit_failures,
                    invalid_intervals: f.invalid_intervals,
                    singular: 0,
                },
            );
        }
        self
    }

    pub fn with_power_failures(
        mut self,
        rows: &[PowerRow],
        fails: &[TestFailures],
    ) -> Self {
        for (r, f) in rows.iter().zip(fails) {
            self.failures.insert(
                format!("{}|{}", f.model_a, f.model_b),
                FailureCounts {
                    fit_failures: f.fit_failures,
                    invalid_intervals: 0,
                    singular: r.n_singular,
                },
            );
        }
        self
    }

    pub fn with_split_failures(mut self, fails: &[SplitFailures]) -> Self {
        for f in fails {
            self.failures.insert(
                f.model.clone(),
                FailureCounts {
                    fit_failures: f.fit_failures,
                    invalid_intervals: f.invalid_intervals,
                    singular: 0,
                },
            );
        }
        self
    }
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let mut w = open(&path)?;
    serde_json::to_writer_pretty(&mut w, manifest)?;
    writeln!(w)?;
    Ok(w.flush()?)
}
