//! Command-line front end: `mix`, `train`, `separate`, `evaluate` and
//! `inspect`. Exit codes are 0 on success, 2 for usage or configuration
//! errors and 3 for failures while running.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use commands::{
    cmd_evaluate, cmd_inspect, cmd_mix, cmd_separate, cmd_train, quantile, EvalReport, EvalRow,
    InspectReport, MetricSummary, MixReport, TrainReport, CHECKPOINT_FILE, LOG_FILE, MANIFEST_FILE,
};
pub use config::{AetSection, ExperimentConfig};

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "AETSEP_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "aetsep",
    version,
    about = "Single-channel source separation with learned front-ends"
)]
pub struct Cli {
    /// Seed for mixing and model initialization (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mix speaker pairs at 0 dB and write the train/test manifest.
    Mix {
        /// Directory with one subdirectory of WAV files per speaker.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        pairs: usize,
        #[arg(long, default_value_t = 10)]
        sentences: usize,
    },
    /// Train a model; writes a checkpoint and a per-epoch CSV log.
    Train {
        /// Configuration file; alternative to --config.
        config_path: Option<PathBuf>,
    },
    /// Separate the checkpoint's target source from a mixture WAV.
    Separate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score the test split with SDR, SIR and SAR.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the manifest named in --config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Distortion filter length in taps.
        #[arg(long, default_value_t = 512)]
        filter_len: usize,
    },
    /// Dump learned analysis filters sorted by dominant frequency.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        top_n: usize,
        #[arg(long, default_value_t = 1024)]
        fft_size: usize,
    },
}

fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v.trim().parse::<usize>().map(Some).map_err(|_| {
            CliError::usage(format!(
                "{THREADS_ENV} must be a non-negative integer, got `{v}`"
            ))
        }),
    }
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let path = path.ok_or_else(|| {
        CliError::usage("train needs a configuration file (--config or positional)")
    })?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// Runs a parsed command.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    let verbose = cli.verbose;
    match cli.command {
        Command::Mix {
            corpus,
            out,
            pairs,
            sentences,
        } => {
            let r = cmd_mix(&corpus, &out, pairs, sentences, cli.seed.unwrap_or(0))?;
            println!(
                "wrote {} mixtures ({} train, {} test) and {}",
                r.mixtures,
                r.train,
                r.test,
                r.manifest.display()
            );
        }
        Command::Train { config_path } => {
            let cfg = load_config(config_path.as_ref().or(cli.config.as_ref()), cli.seed)?;
            let r = cmd_train(&cfg, verbose)?;
            if let Some(last) = r.log.last() {
                println!(
                    "epoch {}: train loss {:.6e}, validation sdr {:.2} dB",
                    last.epoch, last.train_loss, last.val_sdr_db
                );
            }
            println!("checkpoint {}", r.checkpoint.display());
        }
        Command::Separate {
            checkpoint,
            input,
            output,
        } => {
            let n = cmd_separate(&checkpoint, &input, &output)?;
            println!("wrote {} samples to {}", n, output.display());
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            out,
            filter_len,
        } => {
            let manifest = match (manifest, cli.config.as_ref()) {
                (Some(m), _) => m,
                (None, Some(c)) => ExperimentConfig::load(c)?.manifest,
                (None, None) => {
                    return Err(CliError::usage("evaluate needs --manifest or --config"))
                }
            };
            let threads = threads_from_env()?;
            let r = cmd_evaluate(&checkpoint, &manifest, &out, filter_len, threads, verbose)?;
            println!("{} sentences scored", r.rows.len());
            for s in &r.summary {
                println!(
                    "{:>7}: median {:8.3} dB, IQR {:8.3} dB [{:.3}, {:.3}]",
                    s.metric,
                    s.median,
                    s.q3 - s.q1,
                    s.q1,
                    s.q3
                );
            }
        }
        Command::Inspect {
            checkpoint,
            out,
            top_n,
            fft_size,
        } => {
            let r = cmd_inspect(&checkpoint, &out, top_n, fft_size)?;
            println!(
                "{} filters written to {}; mean spectral flatness {:.4} (initial {:.4})",
                r.views.len(),
                out.display(),
                r.learned_flatness,
                r.initial_flatness
            );
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
