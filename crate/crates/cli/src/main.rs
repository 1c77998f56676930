use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use bgmd_cli::commands::{bench_csv, gm_from_csv, run_into, summary_line, sweep, SweepParam};
use bgmd_cli::{CliError, ExperimentConfig};
use clap::{Parser, Subcommand};

const OUT_DIR_ENV: &str = "BGMD_OUT_DIR";

#[derive(Parser)]
#[command(name = "bgmd", version, about = "Robust aggregation experiments with block-coordinate geometric median descent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment; writes metrics JSONL and the resolved config.
    Run {
        config: PathBuf,
        /// Overrides `engine.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Geometric median of a headerless CSV of points.
    Gm {
        points: PathBuf,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 1000)]
        max_iters: usize,
    },
    /// Aggregation timing of Gm against Bgmd; CSV on stdout.
    Bench {
        #[arg(long, default_value_t = 100_000)]
        d: usize,
        #[arg(long, default_value_t = 32)]
        b: usize,
        /// Block sizes; defaults to d/100, d/10, d/2, d.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Grid of runs over config keys and seeds, with a summary CSV.
    Sweep {
        config: PathBuf,
        /// `section.key=v1,v2,...`; repeat for a product grid.
        #[arg(long = "param")]
        params: Vec<SweepParam>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    let env_dir = std::env::var(OUT_DIR_ENV).ok();
    match command {
        Command::Run { config, seed, out_dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.engine.seed = seed;
            }
            let dir = cfg.out_dir(out_dir.as_deref(), env_dir.as_deref());
            let (outcome, files) = run_into(&cfg, &dir)?;
            println!("{}", summary_line(&outcome));
            println!("metrics: {}", files.metrics.display());
        }
        Command::Gm { points, tol, max_iters } => {
            let file = File::open(&points).map_err(|e| CliError::io(&points, e))?;
            let report = gm_from_csv(file, tol, max_iters)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Bench { d, b, k, trials, seed } => {
            let ks = if k.is_empty() {
                vec![(d / 100).max(1), (d / 10).max(1), (d / 2).max(1), d]
            } else {
                k
            };
            bench_csv(&mut std::io::stdout().lock(), d, b, &ks, trials, seed)?;
        }
        Command::Sweep { config, params, seeds, out_dir } => {
            let text = std::fs::read_to_string(&config).map_err(|e| CliError::io(&config, e))?;
            let cfg = ExperimentConfig::parse(&text)?;
            let dir = cfg.out_dir(out_dir.as_deref(), env_dir.as_deref());
            let cells = sweep(&text, Some(&config), &params, seeds, &dir)?;
            println!("{} cells; summary: {}", cells.len(), dir.join("summary.csv").display());
        }
    }
    Ok(())
}
