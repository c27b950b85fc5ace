//! Experiment runner for `fedabc`: config parsing, seeded runs, run
//! comparison and the loss ablation grid.

pub mod compare;
pub mod config;
pub mod runner;

use std::path::PathBuf;

pub use config::{parse_config, parse_str, ConfigError, DatasetConfig, ExperimentConfig, StrategyKind};
pub use runner::{ablation_grid, execute, run_experiment, RunOutput};

/// Overrides `run.output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "FEDABC_OUTPUT_DIR";

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}", runtime_message(*.seed, .source))]
    Runtime {
        seed: Option<u64>,
        source: fedabc::Error,
    },
    #[error("{}: {detail}", path.display())]
    Io { path: PathBuf, detail: String },
    #[error("{}:{line}: {detail}", path.display())]
    Malformed {
        path: PathBuf,
        line: u64,
        detail: String,
    },
}

fn runtime_message(seed: Option<u64>, source: &fedabc::Error) -> String {
    match seed {
        Some(seed) => format!("seed {seed}: {source}"),
        None => source.to_string(),
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

/// Applies the output-directory environment override.
pub fn apply_env(cfg: &mut ExperimentConfig) {
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
        cfg.output_dir = PathBuf::from(dir);
    }
}
