//! Command-line pipeline: preprocess, train, generate, evaluate, plot.

pub mod commands;
pub mod config;

use clap::{Parser, Subcommand};

/// Arguments that did not survive semantic validation; exits with the usage
/// code instead of the runtime one.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

#[derive(Parser, Debug)]
#[command(
    name = "inbetween",
    version,
    about = "Motion stitching and in-betweening with a transformer-denoiser diffusion model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Ingest BVH clips: downsample, chunk, augment, split, write a dataset.
    Preprocess(commands::preprocess::PreprocessArgs),
    /// Train the denoiser on a preprocessed dataset.
    Train(commands::train::TrainArgs),
    /// Generate a motion sequence from sparse context poses.
    Generate(commands::generate::GenerateArgs),
    /// Compute FID / Diversity / Multimodality against a dataset split.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Train the feature autoencoder used by `evaluate`.
    TrainExtractor(commands::evaluate::TrainExtractorArgs),
    /// Render a sequence as an SVG frame strip.
    ExportPlot(commands::plot::ExportPlotArgs),
    /// Write synthetic BVH clips for demos and smoke tests.
    Synth(commands::synth::SynthArgs),
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Preprocess(args) => commands::preprocess::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Generate(args) => commands::generate::run(args),
        Command::Evaluate(args) => commands::evaluate::run(args),
        Command::TrainExtractor(args) => commands::evaluate::run_train_extractor(args),
        Command::ExportPlot(args) => commands::plot::run(args),
        Command::Synth(args) => commands::synth::run(args),
    }
}
