//! `proto-align`: reproducible runs over the synthetic image/report corpus.

mod commands;
mod error;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use proto_align::synth::DEFAULT_DISTRACTOR_RATE;

use crate::error::CliError;

/// Seed used by every subcommand when `--seed` is omitted.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(
    name = "proto-align",
    version,
    about = "Prototype-aligned image/report representation learning"
)]
struct Cli {
    /// More log output; repeat for debug detail. `RUST_LOG` overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Config resolution: defaults, then `--config`, then `--set`, then `--seed`.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` file; a run manifest works too.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Model and shuffling seed [default: 0, or the config file's value].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    /// The held-out tail given by `test_fraction`.
    Test,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic JSONL corpus.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Output file; relative paths land under `--out-dir` when given.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DISTRACTOR_RATE)]
        distractor_rate: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train the three stages; writes a manifest, logs, checkpoints and an
    /// evaluation of the held-out split into `--out-dir`.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint written by an earlier run on the same corpus.
        #[arg(long, conflicts_with_all = ["config", "set", "seed"])]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Report file; relative paths land under `--out-dir` when given.
        #[arg(long, default_value = "eval.txt")]
        report_out: PathBuf,
        /// Also write global image embeddings as CSV.
        #[arg(long)]
        export: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Seed of the random retrieval baseline.
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference checks of every loss term; exits 2 on any failure.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Component and gate ablation table.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Seeds per row, starting at the resolved seed; rows report the mean.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData {
            n,
            seed,
            out,
            distractor_rate,
            out_dir,
        } => commands::gen_data(n, seed, &out, distractor_rate, out_dir.as_deref()),
        Command::Train {
            corpus,
            config,
            out_dir,
            resume,
        } => commands::train(&corpus, &config, &out_dir, resume.as_deref()),
        Command::Eval {
            checkpoint,
            corpus,
            report_out,
            export,
            split,
            seed,
            out_dir,
        } => commands::eval(
            &checkpoint,
            &corpus,
            &report_out,
            export.as_deref(),
            split,
            seed,
            out_dir.as_deref(),
        ),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
        Command::Ablate {
            corpus,
            config,
            seeds,
            out_dir,
        } => commands::ablate(&corpus, &config, seeds, &out_dir),
    }
}

fn main() -> ExitCode {
    std::panic::set_hook(Box::new(|info| eprintln!("internal error: {info}")));
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_logging(cli.verbose);
    match std::panic::catch_unwind(|| dispatch(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("{e}");
            if matches!(e, CliError::User(_)) {
                eprintln!("\nFor usage, try 'proto-align --help'.");
            }
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(3),
    }
}
