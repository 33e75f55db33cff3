//! `simreg`: train, evaluate and inspect similarity-regularized classifiers.
//!
//! Exit codes: 0 success, 1 user error (bad flags, config or inputs),
//! 2 runtime failure after a run has started.

mod eval;
mod preview;
mod run;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable naming the root directory for run outputs.
pub const OUT_ENV: &str = "SIMREG_OUT";

#[derive(Parser, Debug)]
#[command(name = "simreg", version, about = "Similarity-regularized image classifier training")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Supervised training (baseline or with the similarity term), one run per seed.
    Train(TrainArgs),
    /// Similarity-only pretraining of the encoder.
    Pretrain(RunArgs),
    /// Supervised training starting from a pretrained encoder.
    TwoStage(PretrainedArgs),
    /// Train a linear classifier on a frozen pretrained encoder.
    LinearEval(PretrainedArgs),
    /// Evaluate an exported model or checkpoint on one split.
    Eval(eval::EvalArgs),
    /// Write a grid of augmented views of one image.
    AugmentPreview(preview::PreviewArgs),
    /// Write the synthetic dataset as PNG files plus a manifest.
    Synth(eval::SynthArgs),
}

/// Settings shared by every training subcommand.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// `synth` or the path of a manifest CSV.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub aug_level: Option<u8>,
    #[arg(long)]
    pub aug_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// constant, linear or cosine.
    #[arg(long)]
    pub gamma_strategy: Option<String>,
    #[arg(long)]
    pub gamma_min: Option<f64>,
    /// cnn4 or tiny.
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub lr_peak: Option<f64>,
    /// Projection head output size; a comma-separated list runs a sweep.
    #[arg(long, value_delimiter = ',')]
    pub projection_size: Vec<usize>,
    /// Trial seeds; metrics are averaged over them.
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
    /// Output directory (default: a fresh directory under $SIMREG_OUT, or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// baseline or sr.
    #[arg(long)]
    pub mode: Option<String>,
    /// Constant gamma values to sweep, one summary row each.
    #[arg(long, value_delimiter = ',')]
    pub gamma_sweep: Vec<f64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug, Clone)]
pub struct PretrainedArgs {
    /// Checkpoint written by `pretrain` (its final.ckpt).
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, configuration or inputs; nothing was run.
    Usage(String),
    /// Something went wrong while running.
    Runtime(String),
}

impl Failure {
    pub fn usage(e: impl fmt::Display) -> Self {
        Failure::Usage(e.to_string())
    }

    pub fn runtime(e: impl fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "warn"
    } else {
        "info"
    }))
    .format_timestamp(None)
    .init();

    let result = match cli.command {
        Command::Train(a) => run::train(a),
        Command::Pretrain(a) => run::pretrain(a),
        Command::TwoStage(a) => run::with_pretrained(a, simreg::trainer::TrainingMode::TwoStage),
        Command::LinearEval(a) => run::with_pretrained(a, simreg::trainer::TrainingMode::LinearEval),
        Command::Eval(a) => eval::eval(a),
        Command::AugmentPreview(a) => preview::preview(a),
        Command::Synth(a) => eval::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(match f {
                Failure::Usage(_) => 1,
                Failure::Runtime(_) => 2,
            })
        }
    }
}
