//! `pathprune` command-line driver.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pathprune::harness::{compare, run_experiment, schedule_events, ExperimentConfig, RunReport};
use pathprune::masking::load_mask;
use pathprune::schedule::write_events_csv;
use pathprune::Error;

#[derive(Parser)]
#[command(name = "pathprune", version, about = "Structured pruning and sub-network pathway experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Compare report.csv files against the run named by --baseline.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        baseline: String,
    },
    /// Print the layers and sparsity of a BMSK1 mask file.
    InspectMask { file: PathBuf },
    /// Dump the prune/adapt calendar of a config as CSV.
    Events { config: PathBuf },
}

/// Failure classes, mapped to exit codes.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    let io = |e: std::io::Error| Failure::Runtime(e.to_string());
    match command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_experiment(&cfg)?;
            write!(out, "{}", report.render()).map_err(io)?;
            writeln!(out, "artifacts in {}", cfg.output_dir.display()).map_err(io)?;
        }
        Command::Compare { reports, baseline } => {
            let reports = reports
                .iter()
                .map(|p| RunReport::read_csv(p))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::Config(e.to_string()))?;
            let table = compare(&reports, &baseline).map_err(|e| Failure::Config(e.to_string()))?;
            write!(out, "{}", table.render()).map_err(io)?;
        }
        Command::InspectMask { file } => {
            let mask = load_mask(&file).map_err(|e| Failure::Config(e.to_string()))?;
            writeln!(out, "{}", file.display()).map_err(io)?;
            writeln!(out, "{:<12} {:>6} {:>6} {:>8} {:>8} {:>9}", "layer", "rows", "cols", "blocks", "kept", "sparsity")
                .map_err(io)?;
            for l in mask.layers() {
                let s = l.shape();
                let layout = l.layout();
                let kept = l.bits().count_ones();
                writeln!(
                    out,
                    "{:<12} {:>6} {:>6} {:>8} {:>8} {:>9.4}",
                    s.name,
                    s.rows,
                    s.cols,
                    layout.num_blocks(),
                    kept,
                    l.sparsity()
                )
                .map_err(io)?;
            }
            writeln!(
                out,
                "total: {} of {} weights kept, sparsity {:.4}",
                mask.kept_elements(),
                mask.total_elements(),
                mask.sparsity()
            )
            .map_err(io)?;
        }
        Command::Events { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let events = schedule_events(&cfg).map_err(|e| Failure::Config(e.to_string()))?;
            write_events_csv(&events, &mut out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("pathprune: configuration error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("pathprune: {msg}");
            ExitCode::from(2)
        }
    }
}
