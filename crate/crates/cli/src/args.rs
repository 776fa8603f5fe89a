use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "semc",
    version,
    about = "Train, evaluate and inspect SEMC standard-plane classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write a run directory
    Train(TrainArgs),
    /// Score a trained run on a data split
    Eval(EvalArgs),
    /// Run the five-row component ablation
    Ablate(SweepArgs),
    /// Compare fixed alpha values against the adaptive balance
    SweepAlpha(SweepArgs),
    /// Write a synthetic ultrasound-like dataset
    GenSynth(GenSynthArgs),
    /// Report shapes, parameter groups, queue occupancy and gate weights
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file; defaults apply when omitted
    #[arg(long, short)]
    pub config: Option<PathBuf>,

    /// Overrides `train.seed`
    #[arg(long)]
    pub seed: Option<u64>,

    /// Config override, repeatable: `--set mcrm.lambda=0.0`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Config overrides given as trailing `KEY=VALUE` pairs
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory
    #[arg(long, short)]
    pub out: PathBuf,

    /// Overwrite an existing non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`
    #[arg(long)]
    pub run: PathBuf,

    /// Checkpoint to load; defaults to the run's best.ckpt
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// One of train, val, test
    #[arg(long, default_value = "test")]
    pub split: String,

    /// Config override applied on top of the run's resolved config
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub out: OutArgs,

    /// Comma-separated training seeds
    #[arg(long, default_value = "0", value_delimiter = ',')]
    pub seeds: Vec<u64>,

    /// Concurrent training processes
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GenSynthArgs {
    #[command(flatten)]
    pub out: OutArgs,

    #[arg(long, default_value_t = 7)]
    pub classes: usize,

    #[arg(long, default_value_t = 20)]
    pub per_class: usize,

    #[arg(long, default_value_t = 128)]
    pub size: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Motif strength relative to the background
    #[arg(long, default_value_t = 1.0)]
    pub contrast: f32,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    /// Checkpoint to inspect; a freshly initialised model otherwise
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    #[command(flatten)]
    pub config: ConfigArgs,

    /// Sample batch size for the gate report
    #[arg(long, default_value_t = 4)]
    pub batch: usize,

    /// Print the report as JSON
    #[arg(long)]
    pub json: bool,
}
