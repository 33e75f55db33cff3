//! `eval` and `synth` subcommands.

use std::path::{Path, PathBuf};

use clap::Args;
use simreg::archive::Archive;
use simreg::data::{write_synth, Split, SynthSpec};
use simreg::metrics::{confusion, report, MetricsReport};
use simreg::siamese::InferenceModel;
use simreg::trainer::{evaluate, load_dataset, Checkpoint, TrainingConfig};

use crate::{CliResult, Failure};

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Exported model (model.sri) or a training checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// `synth` or a manifest CSV. Defaults to the checkpoint's dataset, or synth.
    #[arg(long)]
    pub dataset: Option<String>,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Override one configuration key (for example synth.n_per_class); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Also write the report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

enum Loaded {
    Exported(InferenceModel),
    Checkpoint(Box<Checkpoint>),
}

fn load_model(path: &Path) -> CliResult<Loaded> {
    let ar = Archive::load(path).map_err(Failure::usage)?;
    if ar.contains("config") {
        Ok(Loaded::Checkpoint(Box::new(
            Checkpoint::from_archive(&ar).map_err(Failure::usage)?,
        )))
    } else {
        Ok(Loaded::Exported(
            InferenceModel::from_archive(&ar).map_err(Failure::usage)?,
        ))
    }
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let split: Split = args.split.parse().map_err(Failure::usage)?;
    let model = load_model(&args.model)?;
    let mut cfg = match &model {
        Loaded::Checkpoint(c) => c.config.clone(),
        Loaded::Exported(m) => TrainingConfig {
            image_size: m.preprocess.size,
            ..TrainingConfig::default()
        },
    };
    if let Some(d) = &args.dataset {
        cfg.set("dataset", d).map_err(Failure::usage)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(Failure::usage)?;
    }
    let data = load_dataset(&cfg).map_err(Failure::usage)?;
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Failure::usage(format!("the {split} split of {} is empty", cfg.dataset)));
    }
    let rep: MetricsReport = match &model {
        Loaded::Checkpoint(c) => {
            let pre = simreg::data::Preprocess::new(c.config.image_size);
            evaluate(&c.model, pre, &data, split).map_err(Failure::runtime)?
        }
        Loaded::Exported(m) => {
            if m.spec.classes != data.num_classes() {
                return Err(Failure::usage(format!(
                    "model has {} classes, dataset has {}",
                    m.spec.classes,
                    data.num_classes()
                )));
            }
            let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let preds = m.predict(&images, 64).map_err(Failure::runtime)?;
            let cm = confusion(&preds, &labels, m.spec.classes).map_err(Failure::runtime)?;
            report(&cm).map_err(Failure::runtime)?
        }
    }
    .with_class_names(&data.class_names);
    let text = format!("split={split}\n{}", rep.to_text());
    print!("{text}");
    if let Some(p) = &args.report {
        std::fs::write(p, &text).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-pixel noise standard deviation.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

pub fn synth(args: SynthArgs) -> CliResult<()> {
    let spec = SynthSpec {
        noise_std: args.noise,
        ..SynthSpec::new(args.n_per_class, args.classes, args.size, args.seed)
    };
    if args.classes < 2 || args.size < 4 || args.n_per_class == 0 || !(args.noise >= 0.0) {
        return Err(Failure::usage(
            "synth needs --classes >= 2, --size >= 4, --n-per-class >= 1 and a non-negative --noise",
        ));
    }
    let manifest = write_synth(&spec, &args.out).map_err(Failure::runtime)?;
    println!("{}", manifest.display());
    Ok(())
}
