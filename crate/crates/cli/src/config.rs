//! Run configuration: built-in defaults, an optional TOML file, and
//! command-line overrides, resolved in that order.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use ij_core::SignalKind;
use serde::Deserialize;

/// Which covariance estimate a subsampled ensemble reports for itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Correction {
    Raw,
    Ranger,
    Vstat,
}

impl FromStr for Correction {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Correction::Raw),
            "ranger" => Ok(Correction::Ranger),
            "vstat" => Ok(Correction::Vstat),
            other => bail!("unknown correction {other:?}; expected raw, ranger, or vstat"),
        }
    }
}

impl fmt::Display for Correction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Correction::Raw => "raw",
            Correction::Ranger => "ranger",
            Correction::Vstat => "vstat",
        })
    }
}

/// A partially specified configuration. Unset fields fall through to the
/// next layer down.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub signal: Option<String>,
    pub n: Option<usize>,
    pub dim: Option<usize>,
    pub replicates: Option<usize>,
    pub queries: Option<usize>,
    pub trees: Option<usize>,
    pub subsample: Option<usize>,
    pub splits: Option<usize>,
    pub seed: Option<u64>,
    pub correction: Option<String>,
    pub models: Option<Vec<String>>,
    pub out: Option<PathBuf>,
    pub level: Option<f64>,
}

impl PartialConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        toml::from_str(&text)
            .with_context(|| format!("parsing config file {}", path.display()))
    }

    /// Desk-scale preset: small enough to finish in minutes on one core
    /// while keeping the qualitative behavior of the full runs.
    pub fn desk() -> Self {
        PartialConfig {
            n: Some(500),
            replicates: Some(100),
            trees: Some(500),
            queries: Some(20),
            ..PartialConfig::default()
        }
    }

    /// Overlay `over` on `self`: fields set in `over` win.
    pub fn overlay(mut self, over: PartialConfig) -> Self {
        macro_rules! take {
            ($f:ident) => {
                if over.$f.is_some() {
                    self.$f = over.$f;
                }
            };
        }
        take!(signal);
        take!(n);
        take!(dim);
        take!(replicates);
        take!(queries);
        take!(trees);
        take!(subsample);
        take!(splits);
        take!(seed);
        take!(correction);
        take!(models);
        take!(out);
        take!(level);
        self
    }
}

/// A fully resolved simulation configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub signal: SignalKind,
    pub n: usize,
    pub dim: usize,
    pub replicates: usize,
    pub queries: usize,
    pub trees: usize,
    pub subsample: usize,
    pub splits: usize,
    pub seed: u64,
    pub correction: Correction,
    pub models: Vec<String>,
    pub out: PathBuf,
    pub level: f64,
}

/// Per-command fallbacks applied after all explicit layers.
#[derive(Debug, Clone)]
pub struct CommandDefaults {
    pub queries: usize,
    pub models: &'static [&'static str],
}

pub fn resolve(p: PartialConfig, defaults: &CommandDefaults) -> Result<RunConfig> {
    let signal: SignalKind = p
        .signal
        .as_deref()
        .unwrap_or("friedman")
        .parse()
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let correction: Correction = p.correction.as_deref().unwrap_or("vstat").parse()?;
    let models = p.models.unwrap_or_else(|| {
        defaults.models.iter().map(|s| s.to_string()).collect()
    });

    let cfg = RunConfig {
        signal,
        n: p.n.unwrap_or(1000),
        dim: p.dim.unwrap_or(6),
        replicates: p.replicates.unwrap_or(200),
        queries: p.queries.unwrap_or(defaults.queries),
        trees: p.trees.unwrap_or(1000),
        subsample: p.subsample.unwrap_or(200),
        splits: p.splits.unwrap_or(50),
        seed: p.seed.unwrap_or(1),
        correction,
        models,
        out: p.out.unwrap_or_else(|| PathBuf::from("out")),
        level: p.level.unwrap_or(0.95),
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    if cfg.n < 2 {
        bail!("n must be at least 2, got {}", cfg.n);
    }
    if cfg.dim < cfg.signal.min_dim().max(1) {
        bail!(
            "signal {:?} needs at least {} covariates, got {}",
            cfg.signal,
            cfg.signal.min_dim().max(1),
            cfg.dim
        );
    }
    if cfg.replicates < 2 {
        bail!("replicates must be at least 2, got {}", cfg.replicates);
    }
    if cfg.queries == 0 {
        bail!("queries must be positive");
    }
    if cfg.trees < 2 {
        bail!("trees must be at least 2, got {}", cfg.trees);
    }
    if cfg.subsample == 0 {
        bail!("subsample must be positive");
    }
    if cfg.splits < 2 {
        bail!("splits must be at least 2, got {}", cfg.splits);
    }
    if cfg.models.is_empty() {
        bail!("at least one model is required");
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        bail!("level must lie in (0, 1), got {}", cfg.level);
    }
    Ok(())
}
