//! `panelqmle`: simulate panels, estimate the QMLE, compute efficiency bounds
//! and run the Monte Carlo and local-expansion checks.

mod commands;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use panelqmle_core::local_expansion::Mode;
use panelqmle_core::simulation::EstimatorChoice;

use crate::commands::Common;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "panelqmle", version, about = "Dynamic panel QMLE with interactive effects")]
struct Cli {
    /// Worker threads for replications (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct OutArgs {
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,

    /// Overrides the configured seed (and PANELQMLE_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one panel: panel.csv and truth.json.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Estimate the QMLE on a CSV panel: fit.json.
    Estimate {
        /// Panel CSV, one row per individual, header t1..tT.
        #[arg(long)]
        data: PathBuf,
        /// Number of factors.
        #[arg(long)]
        r: usize,
        /// Optional JSON estimation options.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte Carlo bias, variance and coverage.
    Mc {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 500)]
        reps: usize,
        #[arg(long, value_enum, default_value_t = EstimatorArg::Qmle)]
        estimator: EstimatorArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Efficiency bounds for a given (alpha, F, D).
    Bound {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Local likelihood-ratio expansion residuals along an (N, T) ladder.
    LrCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        /// ell_infinity, smooth_C or ell_2; overrides the config.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Fixed-effects versus QMLE bias on the same replications.
    CompareFe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EstimatorArg {
    Qmle,
    FixedEffects,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: panelqmle_core::PanelError| e.to_string())
}

fn common(out: PathBuf, seed: Option<u64>, jobs: Option<usize>) -> Common {
    Common { out, seed, jobs }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let jobs = cli.jobs;
    match cli.command {
        Command::Simulate { config, out } => {
            let path = commands::simulate(&config, &common(out.out, out.seed, jobs))?;
            println!("wrote {}", path.display());
        }
        Command::Estimate { data, r, config, out } => {
            let path = commands::estimate(&data, r, config.as_deref(), &common(out, None, jobs))?;
            println!("wrote {}", path.display());
        }
        Command::Mc {
            config,
            reps,
            estimator,
            out,
        } => {
            let choice = match estimator {
                EstimatorArg::Qmle => EstimatorChoice::Qmle,
                EstimatorArg::FixedEffects => EstimatorChoice::FixedEffects,
            };
            let path = commands::mc(&config, reps, choice, &common(out.out, out.seed, jobs))?;
            println!("wrote {}", path.display());
        }
        Command::Bound { config, out } => {
            let (path, text) = commands::bound(&config, &common(out, None, jobs))?;
            println!("{text}\nwrote {}", path.display());
        }
        Command::LrCheck {
            config,
            reps,
            mode,
            out,
        } => {
            let path = commands::lr_check(&config, reps, mode, &common(out.out, out.seed, jobs))?;
            println!("wrote {}", path.display());
        }
        Command::CompareFe { config, reps, out } => {
            let path = commands::compare_fe(&config, reps, &common(out.out, out.seed, jobs))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("panelqmle: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
