//! `linknet` command-line entry point.
//!
//! Exit codes: 0 ok, 2 config, 3 I/O, 4 divergence, 5 model/data
//! mismatch, 6 gradient check failure. 1 is reserved for internal errors.

mod commands;
mod exit;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "linknet", version, about = "Scene-graph generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic JSONL dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Recall@K of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export attention heatmaps and the alignment score for one scene.
    Inspect(InspectArgs),
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and score every cell of an ablation grid over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Generator config (JSON); every field has a default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Checkpoint to write. Epoch losses go to `<out>.losses.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint until the configured epoch count.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `predcls` or `sgcls`.
    #[arg(long, default_value = "sgcls")]
    pub task: String,
    #[arg(long, value_delimiter = ',', default_values_t = [20, 50, 100])]
    pub k: Vec<usize>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub scene_id: String,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub eps: f64,
    /// Objects in the generated scene.
    #[arg(long, default_value_t = 4)]
    pub objects: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Negative control: perturbs the analytic gradient before comparing.
    #[arg(long, hide = true)]
    pub sabotage: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    /// Training scenes.
    #[arg(long)]
    pub data: PathBuf,
    /// Scenes to score; defaults to the training scenes.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Grid of config deltas (JSON); defaults to the built-in sweep.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Seeds per cell, counted up from the train config's seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// CSV table. A summary goes to `<out>.summary.json`.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
