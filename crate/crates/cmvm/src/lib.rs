//! Reproducible verification runs for the cmvm engine: configuration,
//! scenario registry and CSV/JSON outputs.

pub mod config;
pub mod output;
pub mod registry;
pub mod scenarios;

pub use config::ExperimentConfig;
pub use output::{emit_convergence_csv, run, Row, RunRecord};
pub use scenarios::Check;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(String),
    #[error("config: {0}")]
    Config(String),
    #[error("unknown {kind} '{name}'; valid: {valid}")]
    UnknownName { kind: String, name: String, valid: String },
    #[error(transparent)]
    Core(#[from] cmvm_core::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
