//! `songshield` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure classes, mapped to distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<songshield::Error> for CliError {
    fn from(e: songshield::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.into())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "songshield", version, about = "Protect songs against singing-voice conversion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic singing corpus (WAV clips plus manifest.csv).
    GenCorpus(GenCorpusArgs),
    /// Train the identity and lyric encoder ensembles on a corpus.
    Train(TrainArgs),
    /// Protect one voice or every provided clip of a corpus.
    Protect(ProtectArgs),
    /// Measure success-rate reduction of protected clips.
    Evaluate(EvaluateArgs),
    /// Run adversaries against protected clips.
    Attack(AttackArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Singers per gender.
    #[arg(long, default_value_t = 4)]
    pub singers: usize,
    /// Size of the lyric-symbol inventory.
    #[arg(long, default_value_t = 8)]
    pub symbols: usize,
    #[arg(long, default_value_t = 5)]
    pub clips_per_singer: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

/// Inputs shared by the commands that work on a trained corpus.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory of trained encoder files.
    #[arg(long)]
    pub encoders: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ProtectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Corpus clip id to protect.
    #[arg(long, conflicts_with_all = ["voice", "batch"])]
    pub clip: Option<String>,
    /// Voice WAV from outside the corpus.
    #[arg(long, requires = "gender", conflicts_with = "batch")]
    pub voice: Option<PathBuf>,
    /// Backing track for `--voice`; silence when omitted.
    #[arg(long, requires = "voice")]
    pub backing: Option<PathBuf>,
    /// Singer name of `--voice`; a corpus singer reuses that singer's profile.
    #[arg(long, requires = "voice")]
    pub singer: Option<String>,
    #[arg(long, requires = "voice")]
    pub gender: Option<String>,
    /// Space-separated lyric symbols of `--voice`.
    #[arg(long, requires = "voice")]
    pub lyrics: Option<String>,
    /// Protect every provided clip of the corpus into the `--out` directory.
    #[arg(long)]
    pub batch: bool,
    /// Output WAV, or output directory with `--batch`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss-trace CSV (single-clip mode).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long, value_name = "BOOL")]
    pub protect_target: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub protect_source: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub transfer_identity: Option<bool>,
    #[arg(long, value_name = "BOOL")]
    pub transfer_lyric: Option<bool>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory of protected clips written by `protect --batch`.
    #[arg(long)]
    pub protected: Option<PathBuf>,
    /// Share of provided clips that are protected; repeat or comma-separate
    /// to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    pub protect_ratio: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub protected: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also run the query-based reverse-optimization adversary.
    #[arg(long)]
    pub nes: bool,
    /// Also fine-tune the evaluator's identity encoder.
    #[arg(long)]
    pub finetune: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(&a),
        Command::Train(a) => commands::train(&a),
        Command::Protect(a) => commands::protect(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Attack(a) => commands::attack(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
