//! Command line front end for the dialect identification toolkit.
//!
//! One binary, `did`, with a subcommand per stage of the pipeline:
//!
//! * `synth` writes a deterministic multi-domain feature corpus.
//! * `extract` turns a manifest of WAV files into feature files.
//! * `train` fits a single dialect classifier on chosen domains.
//! * `fuse` trains a fusion model over frozen base classifiers.
//! * `score` scores a manifest split with any saved model.
//! * `eval` computes accuracy, EER and min Cavg for a scores file.
//! * `experiment` runs the whole multi-domain comparison end to end.
//!
//! Every command validates all of its inputs before writing any output
//! file, and `--seed` fully determines every output artifact. Exit codes:
//! 0 on success, 2 for validation errors, 3 for runtime errors.

pub mod commands;
pub mod config;
pub mod experiment;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use did_core::Result;

/// Flags shared by every subcommand.
#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Network size preset, `paper` or `toy`; overrides the config file.
    #[arg(long, value_name = "NAME")]
    pub profile: Option<String>,
}

impl CommonArgs {
    /// Resolves defaults, config file and flags into one [`RunConfig`].
    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), self.seed, self.profile.as_deref())
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory to write the corpus into.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Corpus specification JSON; defaults to the built-in corpus.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Number of domains for the built-in corpus (ignored with --spec).
    #[arg(long, value_name = "N", default_value_t = 2)]
    pub domains: usize,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Manifest CSV whose path column points at WAV files.
    #[arg(long, value_name = "FILE")]
    pub wavs: PathBuf,
    /// Directory to write feature files and the rewritten manifest into.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Corpus directory containing manifest.csv.
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    /// Output model path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Comma-separated training domains; defaults to all domains.
    #[arg(long, value_name = "LIST")]
    pub domains: Option<String>,
    /// Channel and hidden width multiplier.
    #[arg(long, value_name = "X", default_value_t = 1.0)]
    pub width: f64,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Corpus directory containing manifest.csv.
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    /// Comma-separated base model paths, one per domain system.
    #[arg(long, value_name = "LIST")]
    pub bases: String,
    /// Fusion kind: `attentive`, `layer` or `lr`.
    #[arg(long, value_name = "KIND")]
    pub kind: String,
    /// Attentive input variant, `output` or `hidden`; overrides the config.
    #[arg(long, value_name = "NAME")]
    pub variant: Option<String>,
    /// Training domain for `lr` calibration.
    #[arg(long, value_name = "DOMAIN")]
    pub calibration_domain: Option<String>,
    /// Output model path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Model to score with (classifier or fusion model).
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Corpus directory containing manifest.csv.
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    /// Output TSV path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Manifest split to score: train, dev or test.
    #[arg(long, value_name = "SPLIT", default_value = "test")]
    pub split: String,
    /// Comma-separated domains to score; defaults to all domains.
    #[arg(long, value_name = "LIST")]
    pub domains: Option<String>,
    /// Also write hidden activations (classifier models only).
    #[arg(long)]
    pub hidden: bool,
    /// Comma-separated base model paths (fusion models only).
    #[arg(long, value_name = "LIST")]
    pub bases: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Scores TSV produced by `score`.
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    /// Corpus directory with the reference manifest.
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    /// Optional JSON report path.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory for all experiment artifacts.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Evaluation condition, `seen` or `unseen`.
    #[arg(long, value_name = "NAME", default_value = "seen")]
    pub condition: String,
    /// Domain excluded from training under the unseen condition.
    #[arg(long, value_name = "DOMAIN")]
    pub unseen_domain: Option<String>,
    /// Number of corpus domains to synthesise.
    #[arg(long, value_name = "N", default_value_t = 2)]
    pub domains: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesise a deterministic multi-domain corpus.
    Synth(SynthArgs),
    /// Extract features from a manifest of WAV files.
    Extract(ExtractArgs),
    /// Train a dialect classifier.
    Train(TrainArgs),
    /// Train a fusion model over frozen base classifiers.
    Fuse(FuseArgs),
    /// Score a manifest split with a saved model.
    Score(ScoreArgs),
    /// Evaluate a scores file against the reference manifest.
    Eval(EvalArgs),
    /// Run the full multi-domain comparison.
    Experiment(ExperimentArgs),
}

#[derive(Parser, Debug)]
#[command(
    name = "did",
    version,
    about = "End-to-end dialect identification with domain-attentive fusion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Runs one parsed command line to completion.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => commands::cmd_synth(&args),
        Command::Extract(args) => commands::cmd_extract(&args),
        Command::Train(args) => commands::cmd_train(&args),
        Command::Fuse(args) => commands::cmd_fuse(&args),
        Command::Score(args) => commands::cmd_score(&args),
        Command::Eval(args) => commands::cmd_eval(&args),
        Command::Experiment(args) => experiment::cmd_experiment(&args),
    }
}
