//! `gbo-lab run <config> [--out DIR] [--format csv|jsonl]`
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 when the experiment
//! itself fails, 1 for I/O problems. `GBO_LAB_THREADS` caps the worker pool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gbo_lab::cli_runner::{emit_results, parse_config, run_experiment, OutputFormat};

#[derive(Parser)]
#[command(name = "gbo-lab", version, about = "Numerical experiments for the nonlocal dispersive equation φ_t = |D|^α φ_x + ½(φ²)_x")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a key=value configuration file.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's `output` key, then `.`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: OutputFormat,
    },
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("GBO_LAB_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.trim().parse().map_err(|_| format!("GBO_LAB_THREADS must be a positive integer, got `{raw}`"))?;
    if threads == 0 {
        return Err("GBO_LAB_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let Command::Run { config, out, format } = Cli::parse().command;
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let text = match std::fs::read_to_string(&config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", config.display());
            return ExitCode::from(2);
        }
    };
    let cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error in {}: {e}", config.display());
            return ExitCode::from(2);
        }
    };
    let record = match run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    let dir = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("."));
    match emit_results(&record, &dir, format) {
        Ok(paths) => {
            for m in &record.metrics {
                println!("{:<36} {:>24}  {}", m.name, gbo_lab::cli_runner::format_float(m.value), m.units);
            }
            for p in paths {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: writing results to {}: {e}", dir.display());
            ExitCode::from(1)
        }
    }
}
