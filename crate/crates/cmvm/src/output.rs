//! Run records and CSV/JSON artifacts.

use std::fs::OpenOptions;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::scenarios::{self, Check};
use crate::HarnessError;

pub const CSV_HEADER: [&str; 9] = ["experiment", "level", "mesh", "metric", "value", "q25", "q75", "n_paths", "seed"];

/// One CSV line of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: String,
    pub level: usize,
    pub mesh: f64,
    pub metric: String,
    pub value: f64,
    pub q25: f64,
    pub q75: f64,
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    pub config_hash: String,
    pub version: String,
    pub wall_time_s: f64,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl RunRecord {
    /// The record without its wall time, for determinism comparisons.
    pub fn timeless(&self) -> RunRecord {
        RunRecord {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

/// Appends `rows` to `path`, writing the header first when the file is new or
/// empty.
pub fn emit_convergence_csv(rows: &[Row], path: &Path) -> Result<(), HarnessError> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let fresh = file.metadata().map_err(|e| io_err(path, e))?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Validates `cfg`, runs its scenario and writes `<scenario>.csv`,
/// `<scenario>.json` and `run-record.json` under `cfg.output`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let scenario = scenarios::lookup(&cfg.scenario)?;
    let out = &cfg.output;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let start = Instant::now();
    let outcome = scenario(cfg)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let hash = cfg.hash();

    let csv_path = out.join(format!("{}.csv", cfg.scenario));
    std::fs::write(&csv_path, "").map_err(|e| io_err(&csv_path, e))?;
    emit_convergence_csv(&outcome.rows, &csv_path)?;

    let json_path = out.join(format!("{}.json", cfg.scenario));
    let doc = json!({
        "scenario": cfg.scenario,
        "config_hash": hash,
        "config": serde_json::from_str::<serde_json::Value>(&cfg.canonical_json())?,
        "checks": outcome.checks,
        "details": outcome.details,
    });
    std::fs::write(&json_path, serde_json::to_string_pretty(&doc)?).map_err(|e| io_err(&json_path, e))?;

    let record = RunRecord {
        scenario: cfg.scenario.clone(),
        config_hash: hash,
        version: env!("CARGO_PKG_VERSION").into(),
        wall_time_s,
        seed: cfg.seed,
        passed: outcome.checks.iter().all(|c| c.pass),
        checks: outcome.checks,
    };
    let rec_path = out.join("run-record.json");
    std::fs::write(&rec_path, serde_json::to_string_pretty(&record)?).map_err(|e| io_err(&rec_path, e))?;
    Ok(record)
}
