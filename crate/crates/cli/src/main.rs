use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedarm_cli::commands::{cmd_run, cmd_sweep, cmd_validate, CommandError};

/// Deterministic federated-averaging simulator with poisoning attacks and
/// robust aggregation defenses.
#[derive(Parser)]
#[command(name = "fedarm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration file and report every problem found.
    Validate {
        /// Path to the JSON configuration.
        config: PathBuf,
    },
    /// Execute one experiment and write its artifacts.
    Run {
        /// Path to the JSON configuration.
        config: PathBuf,
        /// Directory for rounds.csv, run.log, and results.json.
        #[arg(long)]
        out: PathBuf,
        /// Dotted-path override, e.g. --set attack.malicious_ratio=0.2.
        /// May be given multiple times.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Replace master_seed from the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one experiment per value of a single swept axis.
    Sweep {
        /// Path to the JSON configuration.
        config: PathBuf,
        /// What to vary: strategy, factor, or ratio.
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long)]
        values: String,
        /// Parent directory; each value gets its own subdirectory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn install_thread_pool() -> Result<(), String> {
    let Ok(raw) = std::env::var("FEDARM_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .map_err(|_| format!("FEDARM_THREADS=\"{raw}\" is not a thread count"))?;
    if threads == 0 {
        return Err("FEDARM_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| format!("cannot configure worker pool: {e}"))
}

fn main() -> ExitCode {
    if let Err(message) = install_thread_pool() {
        eprintln!("error: {message}");
        return ExitCode::from(2);
    }
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Validate { config } => cmd_validate(&config),
        Command::Run {
            config,
            out,
            set,
            seed,
        } => cmd_run(&config, &out, &set, seed).map(|_| ()),
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => cmd_sweep(&config, &axis, &values, &out).map(|_| ()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CommandError::Validation(problems)) => {
            for problem in problems {
                eprintln!("error: {problem}");
            }
            ExitCode::from(2)
        }
        Err(CommandError::Runtime(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(3)
        }
        Err(CommandError::PartialSweep(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(4)
        }
    }
}
