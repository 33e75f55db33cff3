//! Training subcommands: config resolution, sweeps, trial loops and reports.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use simreg::data::{Dataset, Split};
use simreg::metrics::MetricsReport;
use simreg::schedulers::GammaStrategy;
use simreg::siamese::SrModel;
use simreg::trainer::{evaluate, heldout_sr_loss, load_dataset, Checkpoint, Trainer, TrainingConfig, TrainingMode};

use crate::{CliResult, Failure, PretrainedArgs, RunArgs, TrainArgs, OUT_ENV};

/// Defaults, then the config file, then `--set`, then dedicated flags.
pub fn resolve_config(args: &RunArgs) -> CliResult<TrainingConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
            TrainingConfig::from_text(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => TrainingConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(Failure::usage)?;
    }
    let flags: [(&str, Option<String>); 11] = [
        ("dataset", args.dataset.clone()),
        ("aug.level", args.aug_level.map(|v| v.to_string())),
        ("aug.seed", args.aug_seed.map(|v| v.to_string())),
        ("epochs", args.epochs.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("gamma.value", args.gamma.map(|v| v.to_string())),
        ("gamma.strategy", args.gamma_strategy.clone()),
        ("gamma.min", args.gamma_min.map(|v| v.to_string())),
        ("backbone", args.backbone.clone()),
        ("image_size", args.image_size.map(|v| v.to_string())),
        ("lr.peak", args.lr_peak.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v).map_err(Failure::usage)?;
        }
    }
    if let [single] = args.projection_size[..] {
        cfg.projection_size = single;
    }
    Ok(cfg)
}

/// One point of a sweep. `name` is empty when nothing is swept.
struct Variant {
    name: String,
    config: TrainingConfig,
}

fn expand(base: &TrainingConfig, gammas: &[f64], projections: &[usize]) -> Vec<Variant> {
    let gammas: Vec<Option<f64>> = if gammas.is_empty() {
        vec![None]
    } else {
        gammas.iter().map(|&g| Some(g)).collect()
    };
    let projections: Vec<Option<usize>> = if projections.len() < 2 {
        vec![None]
    } else {
        projections.iter().map(|&p| Some(p)).collect()
    };
    let mut out = Vec::new();
    for g in &gammas {
        for p in &projections {
            let mut config = base.clone();
            let mut parts = Vec::new();
            if let Some(g) = g {
                config.gamma.gamma0 = *g;
                parts.push(format!("gamma-{g}"));
            }
            if let Some(p) = p {
                config.projection_size = *p;
                parts.push(format!("proj-{p}"));
            }
            out.push(Variant {
                name: parts.join("_"),
                config,
            });
        }
    }
    out
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    let mut base = resolve_config(&args.run)?;
    if let Some(m) = &args.mode {
        base.mode = m.parse().map_err(Failure::usage)?;
    }
    if !matches!(base.mode, TrainingMode::Baseline | TrainingMode::Sr) {
        return Err(Failure::usage(format!(
            "`train` runs modes baseline and sr; use the `{}` subcommand for mode {}",
            base.mode.to_string().replace('_', "-"),
            base.mode
        )));
    }
    if !args.gamma_sweep.is_empty() {
        if base.gamma.strategy != GammaStrategy::Constant {
            return Err(Failure::usage("--gamma-sweep needs gamma.strategy=constant"));
        }
        if base.mode != TrainingMode::Sr {
            return Err(Failure::usage("--gamma-sweep needs mode sr"));
        }
    }
    let variants = expand(&base, &args.gamma_sweep, &args.run.projection_size);
    execute(&args.run, variants, None)
}

pub fn pretrain(args: RunArgs) -> CliResult<()> {
    let mut base = resolve_config(&args)?;
    base.mode = TrainingMode::Pretrain;
    base.gamma.strategy = GammaStrategy::Constant;
    base.gamma.gamma0 = 1.0;
    let variants = expand(&base, &[], &args.projection_size);
    execute(&args, variants, None)
}

pub fn with_pretrained(args: PretrainedArgs, mode: TrainingMode) -> CliResult<()> {
    let mut base = resolve_config(&args.run)?;
    base.mode = mode;
    if let Some(p) = &args.pretrained {
        base.pretrained = Some(p.clone());
    }
    let Some(path) = base.pretrained.clone() else {
        return Err(Failure::usage(format!(
            "{} needs --pretrained <checkpoint> (the final.ckpt written by `pretrain`)",
            mode.to_string().replace('_', "-")
        )));
    };
    base.validate().map_err(Failure::usage)?;
    let ckpt = Checkpoint::load(&path).map_err(|e| Failure::usage(format!("pretrained checkpoint: {e}")))?;
    let model = ckpt.model;
    if model.spec.backbone != base.backbone || model.spec.projection_size != base.projection_size {
        log::info!(
            "using backbone {} and projection size {} from the pretrained checkpoint",
            model.spec.backbone,
            model.spec.projection_size
        );
        base.backbone = model.spec.backbone;
        base.projection_size = model.spec.projection_size;
    }
    let variants = expand(&base, &[], &[]);
    execute(&args.run, variants, Some(model))
}

/// A fresh directory under the output root, unless `--out` names one.
fn output_dir(explicit: Option<&Path>, mode: TrainingMode) -> CliResult<PathBuf> {
    if let Some(p) = explicit {
        if p.exists() && !p.is_dir() {
            return Err(Failure::usage(format!(
                "--out {} exists and is not a directory",
                p.display()
            )));
        }
        return Ok(p.to_path_buf());
    }
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stem = mode.to_string().replace('_', "-");
    let mut dir = root.join(&stem);
    let mut n = 2;
    while dir.exists() {
        dir = root.join(format!("{stem}-{n}"));
        n += 1;
    }
    Ok(dir)
}

fn axes_header() -> &'static str {
    "variant,mode,aug_level,backbone,gamma_strategy,gamma,gamma_min,projection_size"
}

fn axes(v: &Variant) -> String {
    let c = &v.config;
    let gamma = if c.mode == TrainingMode::Sr {
        c.gamma.gamma0.to_string()
    } else {
        String::new()
    };
    format!(
        "{},{},{},{},{},{},{},{}",
        v.name, c.mode, c.aug_level, c.backbone, c.gamma.strategy, gamma, c.gamma.gamma_min, c.projection_size
    )
}

fn append(path: &Path, header: &str, row: &str) -> CliResult<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    let text = if fresh {
        format!("{header}\n{row}\n")
    } else {
        format!("{row}\n")
    };
    f.write_all(text.as_bytes())
        .map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

enum TrialResult {
    Metrics(MetricsReport),
    /// Mean similarity loss on a held-out split (similarity-only pretraining).
    HeldoutSr(Option<f64>),
}

fn run_trial(
    config: TrainingConfig,
    data: &Dataset,
    pretrained: Option<&SrModel>,
    dir: &Path,
) -> simreg::Result<TrialResult> {
    let mut t = match pretrained {
        Some(m) => Trainer::with_pretrained(config.clone(), data, m)?,
        None => Trainer::new(config.clone(), data)?,
    };
    t.set_dump_dir(dir);
    t.run()?;
    let out = t.finish();
    out.save(dir)?;
    if config.mode == TrainingMode::Pretrain {
        let split = [Split::Val, Split::Test]
            .into_iter()
            .find(|s| !data.split(*s).is_empty());
        let loss = split
            .map(|s| heldout_sr_loss(&out.checkpoint.model, data, s, &config))
            .transpose()?;
        return Ok(TrialResult::HeldoutSr(loss));
    }
    let report = evaluate(&out.best_model, out.preprocess, data, Split::Test)?.with_class_names(&data.class_names);
    fs::write(dir.join("report.txt"), report.to_text()).map_err(|e| simreg::Error::Io {
        path: dir.join("report.txt"),
        source: e,
    })?;
    Ok(TrialResult::Metrics(report))
}

/// Validates everything, then runs every variant for every seed.
fn execute(args: &RunArgs, variants: Vec<Variant>, pretrained: Option<SrModel>) -> CliResult<()> {
    if args.seeds.is_empty() {
        return Err(Failure::usage("--seeds needs at least one seed"));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = args.seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(Failure::usage(format!("seed {dup} is listed twice")));
    }
    for v in &variants {
        for &seed in &args.seeds {
            let mut c = v.config.clone();
            c.seed = seed;
            c.validate().map_err(Failure::usage)?;
        }
    }
    let first = &variants[0].config;
    let data = load_dataset(first).map_err(Failure::usage)?;
    if data.split(Split::Train).is_empty() {
        return Err(Failure::usage("the train split is empty"));
    }
    if first.mode != TrainingMode::Pretrain && data.split(Split::Test).is_empty() {
        return Err(Failure::usage("the test split is empty; nothing to report"));
    }
    let out = output_dir(args.out.as_deref(), first.mode)?;
    fs::create_dir_all(&out).map_err(|e| Failure::runtime(format!("{}: {e}", out.display())))?;
    fs::write(out.join("config.txt"), first.to_text())
        .map_err(|e| Failure::runtime(format!("{}: {e}", out.display())))?;
    log::info!("writing to {}", out.display());

    let trials_csv = out.join("trials.csv");
    let summary_csv = out.join("summary.csv");
    for stale in [&trials_csv, &summary_csv] {
        if stale.exists() {
            fs::remove_file(stale).map_err(|e| Failure::runtime(format!("{}: {e}", stale.display())))?;
        }
    }
    let mut report_txt = String::new();
    for (vi, v) in variants.iter().enumerate() {
        let mut reports = Vec::new();
        let mut losses = Vec::new();
        for &seed in &args.seeds {
            let mut config = v.config.clone();
            config.seed = seed;
            let dir = out.join(&v.name).join(format!("seed-{seed}"));
            log::info!(
                "{} seed {seed}{}",
                config.mode,
                if v.name.is_empty() {
                    String::new()
                } else {
                    format!(" ({})", v.name)
                }
            );
            match run_trial(config, &data, pretrained.as_ref(), &dir).map_err(Failure::runtime)? {
                TrialResult::Metrics(r) => {
                    append(
                        &trials_csv,
                        &format!("{},seed,{}", axes_header(), r.csv_header()),
                        &format!("{},{seed},{}", axes(v), r.csv_row()),
                    )?;
                    reports.push(r);
                }
                TrialResult::HeldoutSr(loss) => {
                    let cell = loss.map_or_else(String::new, |l| format!("{l:.6}"));
                    append(
                        &trials_csv,
                        &format!("{},seed,heldout_sr", axes_header()),
                        &format!("{},{seed},{cell}", axes(v)),
                    )?;
                    losses.extend(loss);
                }
            }
        }
        let trials = args.seeds.len();
        report_txt.push_str(&format!("[{}]\n", if v.name.is_empty() { "run" } else { &v.name }));
        report_txt.push_str(&format!("{}\n{}\ntrials={trials}\n", axes_header(), axes(v)));
        let (header, row) = match MetricsReport::mean(&reports) {
            Some(mean) => {
                report_txt.push_str(&mean.to_text());
                (
                    format!("{},trials,{}", axes_header(), mean.csv_header()),
                    format!("{},{trials},{}", axes(v), mean.csv_row()),
                )
            }
            None => {
                let mean = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
                let cell = mean.map_or_else(String::new, |l| format!("{l:.6}"));
                report_txt.push_str(&format!("heldout_sr={cell}\n"));
                (
                    format!("{},trials,heldout_sr", axes_header()),
                    format!("{},{trials},{cell}", axes(v)),
                )
            }
        };
        report_txt.push('\n');
        append(&summary_csv, &header, &row)?;
        if vi == 0 {
            println!("{header}");
        }
        println!("{row}");
    }
    fs::write(out.join("report.txt"), report_txt).map_err(|e| Failure::runtime(format!("{}: {e}", out.display())))?;
    println!("results in {}", out.display());
    Ok(())
}
