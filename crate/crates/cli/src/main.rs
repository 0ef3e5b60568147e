//! `inex`: corpus generation, pipeline runs, evaluation, calibration,
//! information diagnostics and transcript replay.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
//! 3 invariant violation.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use inex_core::eval::{Pipeline, Setting};

use crate::config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Invariant(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }

    pub fn nest(self, prefix: &str) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{prefix}{m}")),
            other => other,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Invariant(m) => write!(f, "invariant violation: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<inex_core::Error> for CliError {
    fn from(e: inex_core::Error) -> Self {
        match e {
            inex_core::Error::InvalidArgument(_) | inex_core::Error::Parse { .. } | inex_core::Error::Json(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "inex",
    version,
    about = "Introspective decoding with cross-modal verification on a toy decoder"
)]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Prints the default configuration as JSON and exits.
    #[arg(long)]
    print_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a seeded yes/no corpus to `<out>/corpus.jsonl`.
    GenCorpus {
        /// Number of items.
        #[arg(long)]
        size: usize,
        /// Negative sampling: random, popular or adversarial.
        #[arg(long, default_value = "random")]
        setting: Setting,
    },
    /// Runs a pipeline over a corpus and writes responses, per-step TVER
    /// records and transcripts under `<out>`.
    Run {
        /// Corpus JSONL; overrides the config `corpus` field.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// baseline, in_only or full_inex; overrides the config.
        #[arg(long)]
        pipeline: Option<Pipeline>,
    },
    /// Reads `<run>/responses.jsonl` and writes `<out>/metrics.csv`.
    Eval {
        /// Directory of a previous `run`; defaults to `<out>`.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Reads `<run>/responses.jsonl` and writes `<out>/calibration.csv`.
    Calibrate {
        /// Directory of a previous `run`; defaults to `<out>`.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Number of calibration bins; overrides `num_bins`.
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Runs the mutual-information suite and writes one JSON report per
    /// configuration plus a summary under `<out>/diagnostics`.
    Diagnose {
        /// Overrides `diagnostics.configurations`.
        #[arg(long)]
        configurations: Option<usize>,
    },
    /// Re-executes recorded transcripts (files or directories of `.jsonl`)
    /// and checks they reproduce exactly.
    Replay {
        /// Transcript files or directories.
        #[arg(required = true)]
        transcripts: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if cli.print_defaults {
        println!(
            "{}",
            serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes")
        );
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::Usage("no command given; see --help".into()));
    };
    let mut cfg = load_config(&cli)?;
    match command {
        Command::GenCorpus { size, setting } => commands::gen_corpus(&cfg, *size, *setting),
        Command::Run { corpus, pipeline } => {
            if let Some(c) = corpus {
                cfg.corpus = Some(c.clone());
            }
            if let Some(p) = pipeline {
                cfg.pipeline = *p;
            }
            commands::run(&cfg)
        }
        Command::Eval { run } => commands::eval(&cfg, run.as_deref()),
        Command::Calibrate { run, bins } => {
            if let Some(b) = bins {
                cfg.num_bins = *b;
            }
            cfg.validate()?;
            commands::calibrate(&cfg, run.as_deref())
        }
        Command::Diagnose { configurations } => {
            if let Some(n) = configurations {
                cfg.diagnostics.configurations = *n;
            }
            cfg.validate()?;
            commands::diagnose(&cfg)
        }
        Command::Replay { transcripts } => commands::replay(&cfg, transcripts),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("inex: {e}");
            ExitCode::from(e.code())
        }
    }
}
