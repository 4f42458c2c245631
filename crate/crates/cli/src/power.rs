//! Power experiment: repeatedly test a pair of models (or the boost stage
//! of a two-stage model) on fresh replicates and report the rejection
//! rate at level alpha among the usable replicates.
//!
//! An entry `a|b` tests the prediction difference of two independently
//! seeded fits of `a` and `b`. An entry `a+b` fits the boosted pair and
//! tests its boost stage against zero; the reported pair is then the full
//! spec against the label `zero`.

use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use ij_core::{
    compare_boost_stage, compare_fitted, gen_dataset, gen_queries, Error, QuerySet,
    SeedSpec,
};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::coverage::run_root;
use crate::models::{fit_model, FitSettings, ModelSpec};

/// Largest number of query points a comparison may use: the covariance of
/// the difference must stay well conditioned.
pub const MAX_COMPARISON_QUERIES: usize = 5;

/// One testing task.
#[derive(Debug, Clone, PartialEq)]
pub enum TestSpec {
    Pair { a: ModelSpec, b: ModelSpec },
    BoostStage { spec: ModelSpec },
}

impl FromStr for TestSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some((a, b)) = s.split_once('|') {
            return Ok(TestSpec::Pair { a: a.parse()?, b: b.parse()? });
        }
        let spec: ModelSpec = s.parse()?;
        match spec {
            ModelSpec::Boosted { .. } => Ok(TestSpec::BoostStage { spec }),
            _ => bail!(
                "power entry {s:?} is a single model; use 'a|b' for a pair or 'a+b' \
                 for a boost-stage test"
            ),
        }
    }
}

impl TestSpec {
    pub fn labels(&self) -> (String, String) {
        match self {
            TestSpec::Pair { a, b } => (a.to_string(), b.to_string()),
            TestSpec::BoostStage { spec } => (spec.to_string(), "zero".to_string()),
        }
    }
}

/// One line of power.csv.
#[derive(Debug, Clone)]
pub struct PowerRow {
    pub model_a: String,
    pub model_b: String,
    pub power: f64,
    pub n_singular: usize,
}

/// Run-level diagnostics per entry, for the manifest.
#[derive(Debug, Clone)]
pub struct TestFailures {
    pub model_a: String,
    pub model_b: String,
    pub fit_failures: usize,
}

#[derive(Debug, Clone, Copy)]
enum Outcome {
    Decided { rejected: bool },
    Singular,
    Failed,
}

fn run_entry(
    entry: &TestSpec,
    data: &ij_core::Dataset,
    queries: &QuerySet,
    st: &FitSettings,
    seed: SeedSpec,
    alpha: f64,
) -> Outcome {
    let result = match entry {
        TestSpec::Pair { a, b } => fit_model(a, data, st, seed.child(0))
            .and_then(|ma| {
                let mb = fit_model(b, data, st, seed.child(1))?;
                compare_fitted(&ma, &mb, queries)
            }),
        TestSpec::BoostStage { spec } => {
            fit_model(spec, data, st, seed.child(0)).and_then(|m| {
                let two = m
                    .as_boosted()
                    .expect("boost-stage entries always hold a boosted spec");
                compare_boost_stage(two, queries)
            })
        }
    };
    match result {
        Ok(r) => Outcome::Decided { rejected: r.p_value < alpha },
        Err(Error::SingularCovariance { .. }) | Err(Error::Degenerate(_)) => {
            Outcome::Singular
        }
        Err(_) => Outcome::Failed,
    }
}

pub fn run_power(cfg: &RunConfig) -> Result<(Vec<PowerRow>, Vec<TestFailures>)> {
    let entries: Vec<TestSpec> = cfg
        .models
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()
        .context("parsing power entries")?;
    if cfg.queries > MAX_COMPARISON_QUERIES {
        bail!(
            "comparisons support at most {MAX_COMPARISON_QUERIES} query points, got {}",
            cfg.queries
        );
    }
    let root = run_root(cfg.seed);
    let queries = gen_queries(cfg.queries, cfg.dim, root.child(1))?;
    let st = FitSettings { trees: cfg.trees, subsample: cfg.subsample };
    let alpha = 1.0 - cfg.level;

    let per_replicate: Vec<Vec<Outcome>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| -> Result<Vec<Outcome>> {
            let data =
                gen_dataset(cfg.signal, cfg.n, cfg.dim, root.child(2).child(r as u64))
                    .map_err(|e| anyhow!("replicate {r}: {e}"))?;
            Ok(entries
                .iter()
                .enumerate()
                .map(|(mi, entry)| {
                    let seed = root.child(3).child(r as u64).child(mi as u64);
                    run_entry(entry, &data, &queries, &st, seed, alpha)
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (mi, entry) in entries.iter().enumerate() {
        let (model_a, model_b) = entry.labels();
        let mut rejected = 0usize;
        let mut decided = 0usize;
        let mut singular = 0usize;
        let mut failed = 0usize;
        for rep in &per_replicate {
            match rep[mi] {
                Outcome::Decided { rejected: r } => {
                    decided += 1;
                    if r {
                        rejected += 1;
                    }
                }
                Outcome::Singular => singular += 1,
                Outcome::Failed => failed += 1,
            }
        }
        let power = if decided == 0 {
            f64::NAN
        } else {
            rejected as f64 / decided as f64
        };
        rows.push(PowerRow {
            model_a: model_a.clone(),
            model_b: model_b.clone(),
            power,
            n_singular: singular,
        });
        failures.push(TestFailures { model_a, model_b, fit_failures: failed });
    }
    Ok((rows, failures))
}
