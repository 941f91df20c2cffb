//! `vidclass`: synthetic data, label statistics, resampling, training,
//! evaluation and schedule curves from the command line.

mod commands;
mod config;
mod csvio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{CliError, ConfigFile};

#[derive(Parser, Debug)]
#[command(name = "vidclass", version, about = "Frame-level video classification with NetVLAD / NetFV pooling")]
struct Cli {
    /// JSON config file with one object per subcommand; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialisation and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file.
    Gen(GenFlags),
    /// Label frequency ranking and cumulative coverage.
    Stats(StatsFlags),
    /// Build the tail-label or hard-pattern training set.
    Rebalance(RebalanceFlags),
    /// Train a model; writes a checkpoint and a GAP curve.
    Train(TrainFlags),
    /// GAP and missed-label report for predictions or a checkpoint.
    Eval(EvalFlags),
    /// Learning-rate schedule as CSV.
    LrCurve(LrCurveFlags),
}

#[derive(Args, Debug, Serialize)]
pub struct GenFlags {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub videos: Option<usize>,
    #[arg(long)]
    pub vocab: Option<u32>,
    #[arg(long)]
    pub d_video: Option<u32>,
    #[arg(long)]
    pub d_audio: Option<u32>,
    #[arg(long)]
    pub frames_min: Option<u32>,
    #[arg(long)]
    pub frames_max: Option<u32>,
    #[arg(long)]
    pub labels_min: Option<u32>,
    #[arg(long)]
    pub labels_max: Option<u32>,
    /// Power-law exponent of label frequencies.
    #[arg(long)]
    pub imbalance: Option<f64>,
    /// Feature noise scale.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Probability of replacing one label of a video.
    #[arg(long)]
    pub label_noise: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct StatsFlags {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fraction of labels used for the head-coverage summary line.
    #[arg(long)]
    pub head_fraction: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct RebalanceFlags {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `tail` or `hard`.
    #[arg(long)]
    pub mode: Option<String>,
    /// Tail mode: keep videos with a label ranked above this.
    #[arg(long)]
    pub rank_threshold: Option<usize>,
    /// Hard mode: copies of each hard-pattern video.
    #[arg(long)]
    pub multiplier: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainFlags {
    /// Training set; omit when `--phase` is given.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// `PATH:EPOCHS`, repeatable; phases run in order.
    #[arg(long = "phase")]
    pub phases: Option<Vec<String>>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Continue from a checkpoint on `--data`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// `netvlad` or `netfv`.
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub audio_clusters: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// `separate` or `concatenated`.
    #[arg(long)]
    pub modality: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<f64>,
    #[arg(long)]
    pub initial_lr: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub decay_per_epoch: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub staircase: Option<bool>,
    /// Pseudo-Huber delta.
    #[arg(long)]
    pub delta: Option<f64>,
    /// `adam` or `sgd`.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub top_n: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalFlags {
    /// `video_id,label,confidence` CSV.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// `video_id,label` CSV.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Model to run on `--data`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset providing features and, without `--truth`, the labels.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Write the model's top-n predictions here.
    #[arg(long)]
    pub predictions_out: Option<PathBuf>,
    /// Missed-label report CSV.
    #[arg(long)]
    pub miss_report: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct LrCurveFlags {
    /// `tuned` or `baseline`; individual flags override it.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub initial_lr: Option<f64>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub decay_per_epoch: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub staircase: Option<bool>,
    #[arg(long)]
    pub epochs: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub struct Globals {
    pub file: ConfigFile,
    pub seed: Option<u64>,
    pub verbose: u8,
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<CliError>() {
        return e.kind;
    }
    if let Some(e) = err.downcast_ref::<vidclass_core::Error>() {
        return e.kind();
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    if err.downcast_ref::<csv::Error>().is_some() {
        return "format";
    }
    "error"
}

fn report(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{line}");
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let globals = Globals { file: ConfigFile::load(cli.config.as_deref())?, seed: cli.seed, verbose: cli.verbose };
    match &cli.command {
        Command::Gen(f) => commands::gen(&globals, f),
        Command::Stats(f) => commands::stats(&globals, f),
        Command::Rebalance(f) => commands::rebalance(&globals, f),
        Command::Train(f) => commands::train(&globals, f),
        Command::Eval(f) => commands::eval(&globals, f),
        Command::LrCurve(f) => commands::lr_curve(&globals, f),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            report("usage", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            report(error_kind(&e), &msg);
            ExitCode::FAILURE
        }
    }
}
