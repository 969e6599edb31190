//! `cmm`: run conditional-moment experiments from TOML configs.
//!
//! Exit codes: 0 success, 2 config/validation error, 3 solver divergence
//! (all seeds), 4 partial failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmm_cli::config::{listing, ExperimentConfig, ExperimentSpec};
use cmm_cli::run::{diagnose, execute, exit_code, DiagnoseArgs, EXIT_VALIDATION};
use cmm_core::ivr::LinearIvScenario;

#[derive(Parser)]
#[command(
    name = "cmm",
    about = "Conditional moment matching experiments via a zero-sum game",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonRunArgs {
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list replacing the config's `seeds`.
    #[arg(long, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Suppress progress output.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        /// Path to the experiment config.
        config: PathBuf,
        #[command(flatten)]
        common: CommonRunArgs,
    },
    /// Per-bin slack report for a trained function on a dataset.
    Diagnose {
        /// Trained function artifact (TOML, as written by `run`).
        artifact: PathBuf,
        /// Dataset CSV (`x_*,y,z_*[,z_key][,weight]`).
        dataset: PathBuf,
        /// Output directory for `slack_report.csv`.
        #[arg(long, default_value = "cmm-out")]
        out: PathBuf,
        /// How many rows to print, largest `n_z * f(z)^2` first.
        #[arg(long, default_value_t = 5)]
        top: usize,
        /// z-bin count when the dataset CSV lacks a `z_key` column.
        #[arg(long)]
        cardinality: Option<usize>,
        /// Suppress the printed table.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Print every experiment kind with its fully resolved defaults.
    ListExperiments,
    /// Linear benchmark with default settings: game vs 2SLS vs least
    /// squares over five seeds, plus `estimates.csv`.
    IvrDemo {
        #[command(flatten)]
        common: CommonRunArgs,
    },
    /// Gridworld improvement demo: per-round value CSV and the final
    /// policy listing.
    BellmanDemo {
        #[command(flatten)]
        common: CommonRunArgs,
    },
}

fn apply_common(mut config: ExperimentConfig, common: &CommonRunArgs) -> ExperimentConfig {
    if let Some(out) = &common.out {
        config.out = out.clone();
    }
    if let Some(seeds) = &common.seed_override {
        config.seeds = seeds.clone();
    }
    config
}

fn run_config(config: ExperimentConfig, quiet: bool) -> u8 {
    match execute(&config, quiet) {
        Ok(report) => exit_code(&report) as u8,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_VALIDATION as u8
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code: u8 = match cli.command {
        Command::Run { config, common } => match ExperimentConfig::from_path(&config) {
            Ok(cfg) => run_config(apply_common(cfg, &common), common.quiet),
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_VALIDATION as u8
            }
        },
        Command::Diagnose { artifact, dataset, out, top, cardinality, quiet } => {
            let args = DiagnoseArgs { artifact, dataset, out, top, cardinality };
            match diagnose(&args, quiet) {
                Ok(_) => 0,
                Err(e) => {
                    eprintln!("error: {e}");
                    EXIT_VALIDATION as u8
                }
            }
        }
        Command::ListExperiments => {
            print!("{}", listing());
            0
        }
        Command::IvrDemo { common } => {
            let mut cfg = ExperimentConfig::default_for_kind("ivr-linear").expect("known kind");
            cfg.spec = ExperimentSpec::IvrLinear {
                scenario: LinearIvScenario::default(),
                radius: 1e4,
            };
            cfg.seeds = vec![0, 1, 2, 3, 4];
            run_config(apply_common(cfg, &common), common.quiet)
        }
        Command::BellmanDemo { common } => {
            let cfg = ExperimentConfig::default_for_kind("bellman-improve").expect("known kind");
            run_config(apply_common(cfg, &common), common.quiet)
        }
    };
    ExitCode::from(code)
}
