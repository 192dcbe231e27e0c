//! `mfmasc`: ingest, extract features, train, evaluate, predict, and
//! generate a synthetic corpus.
//!
//! Every failure prints exactly one line, `error[<class>]: <message>`, to
//! standard error and exits nonzero.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfmasc_core::Split;

#[derive(Parser, Debug)]
#[command(name = "mfmasc", version, about = "Light CNN acoustic scene classifier")]
pub struct Cli {
    /// Run configuration (flat key=value); defaults apply to absent keys.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads for feature extraction and evaluation.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate dataset metadata and write an index file.
    Ingest(IngestArgs),
    /// Compute and cache log-mel features for every indexed clip.
    Features(FeaturesArgs),
    /// Train a model on the index's train split.
    Train(TrainArgs),
    /// Report accuracy, confusion matrix and confused pairs.
    Evaluate(EvaluateArgs),
    /// Classify one WAV file.
    Predict(PredictArgs),
    /// Write a synthetic ten-class corpus with metadata.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Tab-separated metadata with filename and scene_label columns.
    #[arg(long)]
    pub meta: PathBuf,
    /// Directory that metadata file names are relative to [default: the metadata's directory].
    #[arg(long)]
    pub audio_root: Option<PathBuf>,
    /// Split for rows without a split column.
    #[arg(long, default_value = "train", value_parser = parse_split)]
    pub split: Split,
    /// Index file to write [default: paths.index].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Cache directory [default: $MFMASC_CACHE, else paths.cache_dir].
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Model file to write [default: paths.model].
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Training log [default: paths.log].
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Number of confused pairs to list.
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    pub wav: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Training clips per class.
    #[arg(long, default_value_t = 10)]
    pub per_class: usize,
    /// Held-out clips per class.
    #[arg(long, default_value_t = 0)]
    pub test_per_class: usize,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: mfmasc_core::Error| e.to_string())
}

/// A classified, single-line failure.
#[derive(Debug)]
pub struct Failure {
    pub class: &'static str,
    pub message: String,
}

impl Failure {
    pub fn new(class: &'static str, message: impl Into<String>) -> Self {
        Failure { class, message: message.into() }
    }
}

impl From<mfmasc_core::Error> for Failure {
    fn from(e: mfmasc_core::Error) -> Self {
        Failure::new(e.class(), e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new("io", e.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat: String = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error[{}]: {flat}", self.class)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", Failure::new("usage", first));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::FAILURE
        }
    }
}
