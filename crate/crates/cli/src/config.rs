//! Run configuration: TOML file merged with command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use cpflow_core::scenarios::{get_scenario, ExperimentKind, Grid, ScenarioError, ScenarioSpec};

pub const WORKERS_ENV: &str = "CPFLOW_WORKERS";
pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_OUT: &str = "cpflow-out";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    UnknownScenario(#[from] ScenarioError),
    #[error("unknown experiment kind '{0}'; expected one of: {1}")]
    UnknownKind(String, String),
    #[error("scenario '{scenario}' has no default for kind '{kind}'; pass --eps or --n and --replicas")]
    NoDefaults { scenario: String, kind: ExperimentKind },
    #[error("missing --scenario")]
    MissingScenario,
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config file {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config file {path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
}

/// Settings shared by the flags and the TOML file; keys mirror flag names.
#[derive(Debug, Clone, Default, Args, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    #[arg(long)]
    pub scenario: Option<String>,
    /// strong, weak, rates, chaos, invariant, clt, donsker, nse, fluctuation, stable, tail
    #[arg(long)]
    pub kind: Option<String>,
    /// Comma-separated step sizes.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Comma-separated particle counts.
    #[arg(long = "n", value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long)]
    pub replicas: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to $CPFLOW_WORKERS, then the core count.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exit nonzero when an acceptance check fails.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub check: Option<bool>,
}

impl Settings {
    pub fn from_toml_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Toml {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Values set in `self` win over `base`.
    pub fn over(self, base: Settings) -> Settings {
        Settings {
            scenario: self.scenario.or(base.scenario),
            kind: self.kind.or(base.kind),
            eps: self.eps.or(base.eps),
            n: self.n.or(base.n),
            replicas: self.replicas.or(base.replicas),
            seed: self.seed.or(base.seed),
            workers: self.workers.or(base.workers),
            out: self.out.or(base.out),
            check: self.check.or(base.check),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: String,
    pub kind: ExperimentKind,
    pub grid: Grid,
    pub replicas: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
    pub check: bool,
}

fn env_workers() -> Option<usize> {
    std::env::var(WORKERS_ENV).ok()?.trim().parse().ok()
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl RunConfig {
    /// Fill gaps from the scenario's defaults and validate.
    pub fn resolve(settings: Settings) -> Result<(RunConfig, ScenarioSpec), ConfigError> {
        let name = settings.scenario.ok_or(ConfigError::MissingScenario)?;
        let spec = get_scenario(&name)?;
        let kind = match settings.kind.as_deref() {
            Some(k) => ExperimentKind::parse(k).ok_or_else(|| {
                let all: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
                ConfigError::UnknownKind(k.to_string(), all.join(", "))
            })?,
            None => spec.experiments[0].kind,
        };
        let defaults = spec.experiment(kind).or_else(|| {
            // `rates` and `strong` share the sweep.
            match kind {
                ExperimentKind::Rates => spec.experiment(ExperimentKind::Strong),
                ExperimentKind::Strong => spec.experiment(ExperimentKind::Rates),
                _ => None,
            }
        });
        let grid = match (settings.eps, settings.n) {
            (Some(_), Some(_)) => return Err(ConfigError::Invalid("give either eps or n, not both".into())),
            (Some(e), None) => Grid::Eps(e),
            (None, Some(n)) => Grid::N(n),
            (None, None) => defaults
                .map(|d| d.grid.clone())
                .ok_or(ConfigError::NoDefaults {
                    scenario: name.clone(),
                    kind,
                })?,
        };
        let replicas = match settings.replicas.or(defaults.map(|d| d.replicas)) {
            Some(m) => m,
            None => {
                return Err(ConfigError::NoDefaults {
                    scenario: name.clone(),
                    kind,
                })
            }
        };
        let workers = settings.workers.or_else(env_workers).unwrap_or_else(default_workers);
        let cfg = RunConfig {
            scenario: name,
            kind,
            grid,
            replicas,
            seed: settings.seed.unwrap_or(DEFAULT_SEED),
            out: settings.out.unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            workers,
            check: settings.check.unwrap_or(false),
        };
        cfg.validate()?;
        Ok((cfg, spec))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.grid.is_empty() {
            return Err(ConfigError::Invalid("parameter grid is empty".into()));
        }
        if self.replicas == 0 {
            return Err(ConfigError::Invalid("replicas must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        match &self.grid {
            Grid::Eps(v) if v.iter().any(|e| !(*e > 0.0 && *e < 1.0)) => {
                Err(ConfigError::Invalid(format!("eps values must lie in (0, 1): {v:?}")))
            }
            Grid::N(v) if v.contains(&0) => Err(ConfigError::Invalid("particle counts must be positive".into())),
            _ => Ok(()),
        }
    }
}
