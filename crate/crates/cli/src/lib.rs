//! Experiment runner: configuration, replica orchestration and output files.

pub mod config;
pub mod experiment;
pub mod output;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{ConfigError, RunConfig, Settings};
pub use experiment::{run_experiment, Check, Outcome};

/// Exit status for configuration errors, including unknown scenarios.
pub const EXIT_USAGE: i32 = 2;
/// Exit status for a run that failed to complete.
pub const EXIT_RUN_ERROR: i32 = 1;
/// Exit status for failed acceptance checks under `--check`.
pub const EXIT_CHECK_FAILED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cpflow", version, about = "Compound-Poisson simulation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub settings: Settings,
    /// TOML file with the same keys as the flags; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Run(RunArgs),
    /// Run a sweep of at least three grid points and fit the rate.
    Rates(RunArgs),
    /// List registered scenarios and their experiments.
    List,
}

/// Result of an executed run.
#[derive(Debug)]
pub struct Execution {
    pub config: RunConfig,
    pub outcome: Outcome,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0:#}")]
    Run(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_USAGE,
            CliError::Run(_) => EXIT_RUN_ERROR,
        }
    }
}

/// Merge a config file under the flags and resolve against the registry.
pub fn resolve(args: &RunArgs) -> Result<(RunConfig, cpflow_core::scenarios::ScenarioSpec), ConfigError> {
    let file = match &args.config {
        Some(p) => Settings::from_toml_file(p)?,
        None => Settings::default(),
    };
    RunConfig::resolve(args.settings.clone().over(file))
}

/// Run on a pool of `cfg.workers` threads and write the artifacts.
pub fn execute(cfg: &RunConfig, spec: &cpflow_core::scenarios::ScenarioSpec, sweep: bool) -> Result<Execution, CliError> {
    if sweep && cfg.grid.len() < 3 {
        return Err(ConfigError::Invalid(format!(
            "rates needs at least 3 grid points, got {}",
            cfg.grid.len()
        ))
        .into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Run(e.into()))?;
    log::info!(
        "{} {} on {} over {:?} with {} replicas, {} workers",
        if sweep { "rates" } else { "run" },
        cfg.kind,
        cfg.scenario,
        cfg.grid.values(),
        cfg.replicas,
        cfg.workers
    );
    let outcome = pool
        .install(|| run_experiment(cfg, spec, sweep))
        .map_err(CliError::Run)?;
    let tag = format!("{}:seed={}", spec.hash_tag(), cfg.seed);
    let artifacts = output::write_artifacts(&cfg.out, cfg, &tag, &outcome).map_err(|e| CliError::Run(e.into()))?;
    Ok(Execution {
        config: cfg.clone(),
        outcome,
        artifacts,
    })
}

/// Registry listing for `cpflow list`.
pub fn list_scenarios() -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    for name in cpflow_core::scenarios::registered_names() {
        let spec = cpflow_core::scenarios::get_scenario(name).expect("registered");
        let kinds: Vec<&str> = spec.experiments.iter().map(|e| e.kind.name()).collect();
        let q = if spec.qualitative { " (qualitative)" } else { "" };
        let _ = writeln!(s, "{:<20} {}{q}\n{:<20} kinds: {}", name, spec.description, "", kinds.join(", "));
    }
    s
}
