//! `trajflow` command-line driver.
//!
//! Exit codes: 0 success, 2 user or configuration error, 3 training or
//! numerical failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trajflow::Error;

#[derive(Parser)]
#[command(name = "trajflow", version, about = "Conditional spline flows for multi-modal trajectory prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scene spec (file path or bundled scene name).
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a default training config for a dataset.
    InitConfig {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the autoencoder, then the flow.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the checkpoints in the config's output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Compute metrics for a trained model on a dataset.
    Evaluate {
        /// Flow checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Dataset file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "kl,mle,oracle,time")]
        metrics: Vec<String>,
        /// Samples per draw (defaults: kl 100, mle 100, oracle 50, time 128).
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long, default_value_t = 5)]
        kl_draws: usize,
        /// Situations used for the oracle metric.
        #[arg(long, default_value_t = 100)]
        max_situations: usize,
        #[arg(long, default_value_t = 0.1)]
        top_frac: f64,
        /// Timed repetitions for the sampling-time metric.
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        /// Output directory (default: `eval/` next to the model).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample futures for a past, sorted by descending likelihood.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// JSON list of [x, y] points, or {"past": [...]}.
        #[arg(long)]
        past: PathBuf,
        #[arg(short, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn env_seed() -> Result<Option<u64>, Error> {
    match std::env::var("TRAJFLOW_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidInput(format!("TRAJFLOW_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Training { .. } | Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let seed = env_seed()?;
    match cli.command {
        Command::GenData { spec, out } => {
            let path = commands::gen_data(&spec, &out, seed)?;
            println!("wrote {}", path.display());
        }
        Command::InitConfig {
            dataset,
            out_dir,
            seed: s,
            output,
        } => {
            commands::init_config(&dataset, &out_dir, seed.unwrap_or(s), &output)?;
            println!("wrote {}", output.display());
        }
        Command::Train { config, resume } => {
            for p in commands::train(&config, resume, seed)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Evaluate {
            model,
            data,
            metrics,
            n_samples,
            kl_draws,
            max_situations,
            top_frac,
            repeats,
            out,
        } => {
            let opts = commands::EvalOptions {
                metrics,
                n_samples,
                kl_draws,
                max_situations,
                top_frac,
                repeats,
                seed,
                out,
            };
            for p in commands::evaluate(&model, &data, &opts)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Sample { model, past, n, out } => {
            let count = commands::sample(&model, &past, n, &out, seed)?;
            println!("wrote {count} samples to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Training {
                last_checkpoint: Some(p),
                ..
            } = &e
            {
                eprintln!("last valid checkpoint: {}", p.display());
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
