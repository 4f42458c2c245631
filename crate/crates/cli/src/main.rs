//! `ij`: coverage, power, and reproduction experiments for IJ confidence
//! intervals, plus one-shot fitting and comparison on CSV data.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ij_cli::config::{resolve, CommandDefaults, PartialConfig, RunConfig};
use ij_cli::report::{self, Manifest};
use ij_cli::tabular::{self, TabularSchema};
use ij_cli::{coverage, power, reproduction};

#[derive(Parser)]
#[command(
    name = "ij",
    version,
    about = "Infinitesimal jackknife variance estimation experiments"
)]
struct Cli {
    /// TOML configuration file; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Number of worker threads (default: all cores). Results are
    /// identical for every choice.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Interval coverage of the estimate and the truth over replicates.
    SimulateCoverage(SimArgs),
    /// Rejection rate of model-comparison tests over replicates.
    Power(SimArgs),
    /// Reproduction intervals across disjoint training sets.
    Reproduction(SimArgs),
    /// Fit models on a CSV file and report held-out predictions.
    FitCsv(CsvArgs),
    /// Compare two models on a CSV file at held-out query rows.
    CompareCsv(CsvArgs),
}

#[derive(Args, Clone)]
struct SimArgs {
    /// Generative signal: friedman, linear, or constant.
    #[arg(long)]
    signal: Option<String>,

    /// Observations per replicate dataset.
    #[arg(long)]
    n: Option<usize>,

    /// Covariate dimension.
    #[arg(long)]
    dim: Option<usize>,

    /// Number of replicate datasets.
    #[arg(long)]
    replicates: Option<usize>,

    /// Number of query points.
    #[arg(long)]
    queries: Option<usize>,

    /// Ensemble members per subsampled model.
    #[arg(long)]
    trees: Option<usize>,

    /// Rows drawn (with replacement) per ensemble member.
    #[arg(long)]
    subsample: Option<usize>,

    /// Disjoint training sets for the reproduction command.
    #[arg(long)]
    splits: Option<usize>,

    /// Master seed; every stream in the run derives from it.
    #[arg(long)]
    seed: Option<u64>,

    /// Ensemble self-covariance estimate: raw, ranger, or vstat.
    #[arg(long)]
    correction: Option<String>,

    /// Comma-separated model specs (power takes 'a|b' pairs or 'a+b'
    /// boost-stage entries).
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Confidence level for intervals and tests.
    #[arg(long)]
    level: Option<f64>,

    /// Desk-scale preset: n=500, replicates=100, trees=500, queries=20.
    #[arg(long)]
    desk: bool,
}

impl SimArgs {
    fn partial(&self) -> PartialConfig {
        PartialConfig {
            signal: self.signal.clone(),
            n: self.n,
            dim: self.dim,
            replicates: self.replicates,
            queries: self.queries,
            trees: self.trees,
            subsample: self.subsample,
            splits: self.splits,
            seed: self.seed,
            correction: self.correction.clone(),
            models: self.models.clone(),
            out: self.out.clone(),
            level: self.level,
        }
    }
}

#[derive(Args, Clone)]
struct CsvArgs {
    /// Input CSV file with a header row.
    #[arg(long)]
    input: PathBuf,

    /// Target column name.
    #[arg(long)]
    target: String,

    /// Log-transform the target (requires positive values).
    #[arg(long)]
    log_target: bool,

    /// Comma-separated categorical columns, expanded to indicators.
    #[arg(long, value_delimiter = ',')]
    categorical: Vec<String>,

    /// Rows held out as query points.
    #[arg(long)]
    queries: Option<usize>,

    /// Ensemble members per subsampled model.
    #[arg(long)]
    trees: Option<usize>,

    /// Rows drawn (with replacement) per ensemble member.
    #[arg(long)]
    subsample: Option<usize>,

    /// Master seed; every stream in the run derives from it.
    #[arg(long)]
    seed: Option<u64>,

    /// Ensemble self-covariance estimate: raw, ranger, or vstat.
    #[arg(long)]
    correction: Option<String>,

    /// Comma-separated model specs (compare-csv takes exactly two).
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Confidence level for intervals and tests.
    #[arg(long)]
    level: Option<f64>,
}

impl CsvArgs {
    fn partial(&self) -> PartialConfig {
        PartialConfig {
            queries: self.queries,
            trees: self.trees,
            subsample: self.subsample,
            seed: self.seed,
            correction: self.correction.clone(),
            models: self.models.clone(),
            out: self.out.clone(),
            level: self.level,
            ..PartialConfig::default()
        }
    }

    fn schema(&self) -> TabularSchema {
        TabularSchema {
            target: self.target.clone(),
            log_target: self.log_target,
            categorical: self.categorical.clone(),
        }
    }
}

const COVERAGE_DEFAULTS: CommandDefaults =
    CommandDefaults { queries: 100, models: &["rf:full"] };
const POWER_DEFAULTS: CommandDefaults =
    CommandDefaults { queries: 5, models: &["lm|rf:full"] };
const REPRODUCTION_DEFAULTS: CommandDefaults =
    CommandDefaults { queries: 100, models: &["rf:full"] };
const FIT_CSV_DEFAULTS: CommandDefaults =
    CommandDefaults { queries: 5, models: &["rf:full"] };
const COMPARE_CSV_DEFAULTS: CommandDefaults =
    CommandDefaults { queries: 5, models: &["lm", "rf:full"] };

fn layered_config(
    file: &Option<PathBuf>,
    desk: bool,
    flags: PartialConfig,
    defaults: &CommandDefaults,
) -> Result<RunConfig> {
    let mut layered = PartialConfig::default();
    if let Some(path) = file {
        layered = layered.overlay(PartialConfig::from_toml_file(path)?);
    }
    if desk {
        layered = layered.overlay(PartialConfig::desk());
    }
    layered = layered.overlay(flags);
    resolve(layered, defaults)
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out)
        .with_context(|| format!("creating output directory {}", cfg.out.display()))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.cmd {
        Cmd::SimulateCoverage(args) => {
            let cfg =
                layered_config(&cli.config, args.desk, args.partial(), &COVERAGE_DEFAULTS)?;
            prepare_out(&cfg)?;
            let (rows, failures) = coverage::run_coverage(&cfg)?;
            report::write_coverage(&cfg.out.join("coverage.csv"), &rows)?;
            let manifest = Manifest::new("simulate-coverage", &cfg)
                .with_coverage_failures(&failures);
            report::write_manifest(&cfg.out, &manifest)?;
            println!("wrote {} coverage rows to {}", rows.len(), cfg.out.display());
        }
        Cmd::Power(args) => {
            let cfg =
                layered_config(&cli.config, args.desk, args.partial(), &POWER_DEFAULTS)?;
            prepare_out(&cfg)?;
            let (rows, failures) = power::run_power(&cfg)?;
            report::write_power(&cfg.out.join("power.csv"), &rows)?;
            let manifest =
                Manifest::new("power", &cfg).with_power_failures(&rows, &failures);
            report::write_manifest(&cfg.out, &manifest)?;
            println!("wrote {} power rows to {}", rows.len(), cfg.out.display());
        }
        Cmd::Reproduction(args) => {
            let cfg = layered_config(
                &cli.config,
                args.desk,
                args.partial(),
                &REPRODUCTION_DEFAULTS,
            )?;
            prepare_out(&cfg)?;
            let (rows, mse_rows, failures) = reproduction::run_reproduction(&cfg)?;
            report::write_reproduction(&cfg.out.join("reproduction.csv"), &rows)?;
            report::write_mse(&cfg.out.join("mse.csv"), &mse_rows)?;
            let manifest =
                Manifest::new("reproduction", &cfg).with_split_failures(&failures);
            report::write_manifest(&cfg.out, &manifest)?;
            println!(
                "wrote {} reproduction rows and {} mse rows to {}",
                rows.len(),
                mse_rows.len(),
                cfg.out.display()
            );
        }
        Cmd::FitCsv(args) => {
            let mut cfg =
                layered_config(&cli.config, false, args.partial(), &FIT_CSV_DEFAULTS)?;
            let table = tabular::ingest_csv(&args.input, &args.schema())?;
            cfg.n = table.data.n();
            cfg.dim = table.data.dim();
            cfg.replicates = 0;
            cfg.splits = 0;
            prepare_out(&cfg)?;
            let rows = tabular::run_fit_csv(&cfg, &table)?;
            report::write_predictions(&cfg.out.join("predictions.csv"), &rows)?;
            report::write_manifest(&cfg.out, &Manifest::new("fit-csv", &cfg))?;
            println!(
                "wrote {} prediction rows to {} ({} incomplete rows dropped)",
                rows.len(),
                cfg.out.display(),
                table.dropped_rows
            );
        }
        Cmd::CompareCsv(args) => {
            let mut cfg =
                layered_config(&cli.config, false, args.partial(), &COMPARE_CSV_DEFAULTS)?;
            let table = tabular::ingest_csv(&args.input, &args.schema())?;
            cfg.n = table.data.n();
            cfg.dim = table.data.dim();
            cfg.replicates = 0;
            cfg.splits = 0;
            prepare_out(&cfg)?;
            let row = tabular::run_compare_csv(&cfg, &table)?;
            report::write_comparison(&cfg.out.join("comparison.csv"), &row)?;
            report::write_manifest(&cfg.out, &Manifest::new("compare-csv", &cfg))?;
            println!(
                "{} vs {}: statistic {:.4}, p = {:.4}",
                row.model_a, row.model_b, row.statistic, row.p_value
            );
        }
    }
    Ok(())
}

fn kind_name(e: &ij_core::Error) -> &'static str {
    use ij_core::Error::*;
    match e {
        Empty(_) => "empty",
        Dimension(_) => "dimension",
        InvalidArgument(_) => "invalid_argument",
        NonFinite(_) => "non_finite",
        SingularDesign { .. } => "singular_design",
        Divergence(_) => "divergence",
        Degenerate(_) => "degenerate",
        EmptyNeighborhood => "empty_neighborhood",
        NoOobWeight => "no_oob_weight",
        NegativeVariance { .. } => "negative_variance",
        SingularCovariance { .. } => "singular_covariance",
    }
}

fn error_record(e: &anyhow::Error) -> String {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<ij_core::Error>())
        .map_or("cli", kind_name);
    serde_json::json!({
        "error": { "kind": kind, "message": format!("{e:#}") }
    })
    .to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
