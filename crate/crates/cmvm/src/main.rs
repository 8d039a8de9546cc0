use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use cmvm::{scenarios, ExperimentConfig};

#[derive(Parser)]
#[command(name = "cmvm", version, about = "Verification runs for stochastic integrals against cylindrical martingale-valued measures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario named in a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path override, e.g. `grid.n_steps=64`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    ListScenarios,
    ValidateConfig { file: PathBuf },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> anyhow::Result<bool> {
    match Cli::parse().command {
        Command::Run { config, mut sets, seed, out } => {
            if let Some(s) = seed {
                sets.push(format!("seed={s}"));
            }
            if let Some(o) = out {
                sets.push(format!("output={}", serde_json::to_string(&o)?));
            }
            let cfg = ExperimentConfig::load(&config)?
                .with_overrides(&sets)
                .context("applying overrides")?;
            let record = cmvm::run(&cfg)?;
            for c in &record.checks {
                let status = match (c.pass, c.reliable) {
                    (true, true) => "PASS",
                    (true, false) => "PASS (unreliable)",
                    (false, _) => "FAIL",
                };
                println!("{status:<18} {}: value={:.6e} target={:.6e} tol={:.3e}", c.name, c.value, c.target, c.tolerance);
            }
            println!(
                "{} {} in {:.2}s, config {}",
                record.scenario,
                if record.passed { "passed" } else { "failed" },
                record.wall_time_s,
                &record.config_hash[..12]
            );
            Ok(record.passed)
        }
        Command::ListScenarios => {
            for (name, _, about) in scenarios::SCENARIOS {
                println!("{name:<30} {about}");
            }
            Ok(true)
        }
        Command::ValidateConfig { file } => {
            ExperimentConfig::load(&file)?.validate()?;
            println!("{}: ok", file.display());
            Ok(true)
        }
    }
}
