//! Training loops: supervised baseline, similarity-regularized training,
//! contrastive pretraining, two-stage fine-tuning and linear evaluation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::augmentation::{AugmentationLevel, Pipeline};
use crate::config::parse_key_values;
use crate::data::{load_manifest, synth_dataset, Dataset, Preprocess, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{
    combine, cross_entropy_with_logits, mixed_target, smoothed_target, sr_penalty_grad, LossBreakdown,
};
use crate::metrics::{confusion, report, MetricsReport};
use crate::nn::{softmax, Mode, Param, Parameterized};
use crate::optim::{Adam, Optimizer, Sgd};
use crate::rng::{domain, fork, stream};
use crate::schedulers::{clip_gradients, GammaSchedule, GammaStrategy, LrSchedule};
use crate::siamese::{argmax, copy_state, init_model, stack_images, Backbone, ModelSpec, SrModel, ViewGrad};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingMode {
    /// Supervised cross-entropy only.
    Baseline,
    /// Cross-entropy plus the similarity term.
    Sr,
    /// Similarity term only (`gamma = 1`).
    Pretrain,
    /// Supervised training of the whole network from pretrained `f1` weights.
    TwoStage,
    /// Only `fc` is trained on top of a frozen pretrained `f1`.
    LinearEval,
}

impl TrainingMode {
    fn uses_sr(self) -> bool {
        matches!(self, TrainingMode::Sr | TrainingMode::Pretrain)
    }
}

impl fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainingMode::Baseline => "baseline",
            TrainingMode::Sr => "sr",
            TrainingMode::Pretrain => "pretrain",
            TrainingMode::TwoStage => "two_stage",
            TrainingMode::LinearEval => "linear_eval",
        })
    }
}

impl FromStr for TrainingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "baseline" => Ok(TrainingMode::Baseline),
            "sr" => Ok(TrainingMode::Sr),
            "pretrain" => Ok(TrainingMode::Pretrain),
            "two_stage" => Ok(TrainingMode::TwoStage),
            "linear_eval" => Ok(TrainingMode::LinearEval),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected baseline, sr, pretrain, two_stage or linear_eval)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetRef {
    /// Generated in memory from the `synth.*` settings.
    Synth,
    /// A manifest CSV.
    Manifest(PathBuf),
}

impl fmt::Display for DatasetRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetRef::Synth => f.write_str("synth"),
            DatasetRef::Manifest(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Every knob of a training run. `Default` is the reference setting:
/// similarity training at augmentation level 4 with constant `gamma = 0.5`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub mode: TrainingMode,
    pub aug_level: u8,
    /// Seed for augmentation streams; `None` uses `seed`.
    pub aug_seed: Option<u64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: GammaSchedule,
    pub beta: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// `total_epochs` is ignored; the run length comes from `epochs`.
    pub lr: LrSchedule,
    pub clip_max_norm: f64,
    pub weight_decay: f64,
    pub backbone: Backbone,
    pub projection_size: usize,
    /// Baseline variant that averages cross-entropy over two views.
    pub two_view_ce: bool,
    pub image_size: usize,
    pub dataset: DatasetRef,
    pub synth: SynthSpec,
    pub linear_batch_size: usize,
    pub linear_epochs: usize,
    /// Use the unscaled 40 → 4e-6 linear-evaluation learning rates.
    pub linear_unscaled_lr: bool,
    /// Pretrained checkpoint for two-stage training and linear evaluation.
    pub pretrained: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            mode: TrainingMode::Sr,
            aug_level: 4,
            aug_seed: None,
            batch_size: 64,
            epochs: 50,
            gamma: GammaSchedule::constant(0.5),
            beta: 0.99,
            label_smoothing: 0.1,
            seed: 1,
            lr: LrSchedule::default(),
            clip_max_norm: 5.0,
            weight_decay: 1e-6,
            backbone: Backbone::Cnn4,
            projection_size: 128,
            two_view_ce: false,
            image_size: 256,
            dataset: DatasetRef::Synth,
            synth: SynthSpec::new(100, 3, 256, 0),
            linear_batch_size: 256,
            linear_epochs: 10,
            linear_unscaled_lr: false,
            pretrained: None,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl TrainingConfig {
    pub const KEYS: [&'static str; 30] = [
        "mode",
        "aug.level",
        "aug.seed",
        "batch_size",
        "epochs",
        "gamma.strategy",
        "gamma.value",
        "gamma.min",
        "beta",
        "label_smoothing",
        "seed",
        "lr.warmup_epochs",
        "lr.start",
        "lr.peak",
        "lr.end",
        "clip.max_norm",
        "weight_decay",
        "backbone",
        "projection_size",
        "two_view_ce",
        "image_size",
        "dataset",
        "synth.n_per_class",
        "synth.classes",
        "synth.seed",
        "synth.noise",
        "linear.batch_size",
        "linear.epochs",
        "linear.unscaled_lr",
        "pretrained",
    ];

    /// Sets one `key=value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "mode" => self.mode = v.parse()?,
            "aug.level" => self.aug_level = parse_num(key, v)?,
            "aug.seed" => {
                self.aug_seed = match v {
                    "" | "auto" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "gamma.strategy" => self.gamma.strategy = v.parse()?,
            "gamma.value" => self.gamma.gamma0 = parse_num(key, v)?,
            "gamma.min" => self.gamma.gamma_min = parse_num(key, v)?,
            "beta" => self.beta = parse_num(key, v)?,
            "label_smoothing" => self.label_smoothing = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "lr.warmup_epochs" => self.lr.warmup_epochs = parse_num(key, v)?,
            "lr.start" => self.lr.lr_start = parse_num(key, v)?,
            "lr.peak" => self.lr.lr_peak = parse_num(key, v)?,
            "lr.end" => self.lr.lr_end = parse_num(key, v)?,
            "clip.max_norm" => self.clip_max_norm = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "backbone" => self.backbone = v.parse()?,
            "projection_size" => self.projection_size = parse_num(key, v)?,
            "two_view_ce" => self.two_view_ce = parse_bool(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "dataset" => {
                self.dataset = match v {
                    "synth" => DatasetRef::Synth,
                    "" => return Err(Error::Config("dataset: empty value".into())),
                    path => DatasetRef::Manifest(PathBuf::from(path)),
                }
            }
            "synth.n_per_class" => self.synth.n_per_class = parse_num(key, v)?,
            "synth.classes" => self.synth.classes = parse_num(key, v)?,
            "synth.seed" => self.synth.seed = parse_num(key, v)?,
            "synth.noise" => self.synth.noise_std = parse_num(key, v)?,
            "linear.batch_size" => self.linear_batch_size = parse_num(key, v)?,
            "linear.epochs" => self.linear_epochs = parse_num(key, v)?,
            "linear.unscaled_lr" => self.linear_unscaled_lr = parse_bool(key, v)?,
            "pretrained" => self.pretrained = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "mode" => self.mode.to_string(),
            "aug.level" => self.aug_level.to_string(),
            "aug.seed" => self.aug_seed.map_or_else(|| "auto".to_string(), |s| s.to_string()),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "gamma.strategy" => self.gamma.strategy.to_string(),
            "gamma.value" => self.gamma.gamma0.to_string(),
            "gamma.min" => self.gamma.gamma_min.to_string(),
            "beta" => self.beta.to_string(),
            "label_smoothing" => self.label_smoothing.to_string(),
            "seed" => self.seed.to_string(),
            "lr.warmup_epochs" => self.lr.warmup_epochs.to_string(),
            "lr.start" => self.lr.lr_start.to_string(),
            "lr.peak" => self.lr.lr_peak.to_string(),
            "lr.end" => self.lr.lr_end.to_string(),
            "clip.max_norm" => self.clip_max_norm.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "backbone" => self.backbone.to_string(),
            "projection_size" => self.projection_size.to_string(),
            "two_view_ce" => self.two_view_ce.to_string(),
            "image_size" => self.image_size.to_string(),
            "dataset" => self.dataset.to_string(),
            "synth.n_per_class" => self.synth.n_per_class.to_string(),
            "synth.classes" => self.synth.classes.to_string(),
            "synth.seed" => self.synth.seed.to_string(),
            "synth.noise" => self.synth.noise_std.to_string(),
            "linear.batch_size" => self.linear_batch_size.to_string(),
            "linear.epochs" => self.linear_epochs.to_string(),
            "linear.unscaled_lr" => self.linear_unscaled_lr.to_string(),
            "pretrained" => self
                .pretrained
                .as_ref()
                .map_or_else(String::new, |p| p.display().to_string()),
            _ => return None,
        })
    }

    /// Parses `key=value` text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainingConfig::default();
        for (k, v) in parse_key_values(text)? {
            c.set(&k, &v)?;
        }
        Ok(c)
    }

    /// A complete snapshot; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        TrainingConfig::KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        AugmentationLevel::new(self.aug_level)?;
        let lvl = self.aug_level;
        match self.mode {
            TrainingMode::Sr | TrainingMode::Pretrain if lvl == 0 => {
                return Err(Error::Config(format!(
                    "mode {} needs two distinct views; augmentation level 0 produces identical ones",
                    self.mode
                )))
            }
            TrainingMode::Sr | TrainingMode::Pretrain if lvl > 4 => {
                return Err(Error::Config(format!(
                    "mode {} is not defined with batch mixing (augmentation level {lvl}); use levels 1-4",
                    self.mode
                )))
            }
            _ => {}
        }
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("projection_size", self.projection_size),
            ("linear.batch_size", self.linear_batch_size),
            ("linear.epochs", self.linear_epochs),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size must be at least 8, got {}",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(self.clip_max_norm > 0.0) {
            return Err(Error::Config("clip.max_norm must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.gamma.validate()?;
        self.lr_schedule().validate()?;
        if matches!(self.mode, TrainingMode::TwoStage | TrainingMode::LinearEval) && self.pretrained.is_none() {
            return Err(Error::Config(format!(
                "mode {} needs a pretrained checkpoint",
                self.mode
            )));
        }
        Ok(())
    }

    pub fn effective_aug_seed(&self) -> u64 {
        self.aug_seed.unwrap_or(self.seed)
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        match self.mode {
            TrainingMode::LinearEval => LrSchedule::linear_eval(self.linear_epochs as f64, self.linear_unscaled_lr),
            _ => LrSchedule {
                total_epochs: self.epochs as f64,
                ..self.lr
            },
        }
    }

    pub fn run_epochs(&self) -> usize {
        match self.mode {
            TrainingMode::LinearEval => self.linear_epochs,
            _ => self.epochs,
        }
    }

    pub fn run_batch_size(&self) -> usize {
        match self.mode {
            TrainingMode::LinearEval => self.linear_batch_size,
            _ => self.batch_size,
        }
    }

    pub fn model_spec(&self, classes: usize) -> ModelSpec {
        ModelSpec {
            backbone: self.backbone,
            classes,
            projection_size: self.projection_size,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            image_size: self.image_size,
            ..self.synth.clone()
        }
    }
}

/// Loads the configured dataset.
pub fn load_dataset(config: &TrainingConfig) -> Result<Dataset> {
    match &config.dataset {
        DatasetRef::Synth => Ok(synth_dataset(&config.synth_spec())?.1),
        DatasetRef::Manifest(p) => Dataset::load(&load_manifest(p)?),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub ce: f64,
    pub sr: f64,
    pub gamma: f64,
    pub lr: f64,
    pub total: f64,
    /// Seconds since the run started.
    pub wall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    pub val_accuracy: Option<f64>,
    pub wall: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum HistoryLine {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    /// One JSON object per line, steps of each epoch followed by its summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut steps = self.steps.iter().peekable();
        let mut push = |line: HistoryLine| {
            out.push_str(&serde_json::to_string(&line).expect("history serializes"));
            out.push('\n');
        };
        for e in &self.epochs {
            while let Some(s) = steps.next_if(|s| s.epoch <= e.epoch) {
                push(HistoryLine::Step(*s));
            }
            push(HistoryLine::Epoch(*e));
        }
        for s in steps {
            push(HistoryLine::Step(*s));
        }
        out
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut h = TrainingHistory::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: HistoryLine =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("history line {}: {e}", i + 1)))?;
            match parsed {
                HistoryLine::Step(s) => h.steps.push(s),
                HistoryLine::Epoch(e) => h.epochs.push(e),
            }
        }
        Ok(h)
    }

    /// Copy with wall-clock stamps zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut h = self.clone();
        h.steps.iter_mut().for_each(|s| s.wall = 0.0);
        h.epochs.iter_mut().for_each(|e| e.wall = 0.0);
        h
    }
}

/// One assembled minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub views: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Partner labels and own-label weight when the batch was mixed.
    pub mix: Option<(Vec<usize>, f64)>,
}

/// Training images resized to the network input, plus normalized test-path
/// tensors for validation and test.
#[derive(Debug, Clone)]
struct Prepared {
    train: Vec<(Image, usize)>,
    val: Vec<(Image, usize)>,
    classes: usize,
    preprocess: Preprocess,
}

impl Prepared {
    fn new(data: &Dataset, image_size: usize) -> Result<Self> {
        let classes = data.num_classes();
        if classes < 2 {
            return Err(Error::Data(format!("dataset has {classes} classes, need at least 2")));
        }
        let pre = Preprocess::new(image_size);
        let train: Vec<_> = data
            .split(Split::Train)
            .into_iter()
            .map(|s| (pre.resize_train(&s.image), s.label))
            .collect();
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let val = data
            .split(Split::Val)
            .into_iter()
            .map(|s| (pre.test(&s.image), s.label))
            .collect();
        Ok(Prepared {
            train,
            val,
            classes,
            preprocess: pre,
        })
    }
}

/// A resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainingConfig,
    pub model: SrModel,
    pub optimizer: Optimizer,
    /// Optimizer iterations completed.
    pub iteration: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub history: TrainingHistory,
    /// Best validation accuracy so far, the epoch it was reached and the weights.
    pub best: Option<(f64, usize, SrModel)>,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let mut ar = Archive::new();
        self.model.write_to(&mut ar);
        self.optimizer.write_to(&mut ar);
        ar.insert_text("config", self.config.to_text());
        ar.insert_text("history", self.history.to_jsonl());
        let mut meta = format!(
            "iteration={}\nepoch={}\nseed={}\naug_seed={}\n",
            self.iteration,
            self.epoch,
            self.config.seed,
            self.config.effective_aug_seed()
        );
        if let Some((acc, epoch, best)) = &self.best {
            meta.push_str(&format!("best_accuracy={acc}\nbest_epoch={epoch}\n"));
            let mut b = Archive::new();
            best.write_to(&mut b);
            ar.insert_prefixed("best/", &b);
        }
        ar.insert_text("meta", meta);
        ar
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        let config = TrainingConfig::from_text(ar.text("config")?).map_err(|e| Error::Format(e.to_string()))?;
        let meta = parse_key_values(ar.text("meta")?).map_err(|e| Error::Format(e.to_string()))?;
        let field = |k: &str| -> Result<&String> {
            meta.get(k)
                .ok_or_else(|| Error::Format(format!("checkpoint meta is missing {k:?}")))
        };
        let num = |k: &str| -> Result<u64> {
            field(k)?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint meta {k:?} is not an integer")))
        };
        let model = SrModel::read_from(ar)?;
        let mut optimizer = new_optimizer(&config);
        optimizer.read_from(ar)?;
        let best = match meta.get("best_accuracy") {
            Some(acc) => {
                let acc: f64 = acc
                    .parse()
                    .map_err(|_| Error::Format("checkpoint best_accuracy is not a number".into()))?;
                Some((
                    acc,
                    num("best_epoch")? as usize,
                    SrModel::read_from(&ar.extract_prefixed("best/"))?,
                ))
            }
            None => None,
        };
        Ok(Checkpoint {
            model,
            optimizer,
            iteration: num("iteration")?,
            epoch: num("epoch")? as usize,
            history: TrainingHistory::parse_jsonl(ar.text("history")?)?,
            best,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_archive(&Archive::load(path)?)
    }
}

fn new_optimizer(config: &TrainingConfig) -> Optimizer {
    match config.mode {
        TrainingMode::LinearEval => Optimizer::Sgd(Sgd::new(0.9, 0.0)),
        _ => Optimizer::Adam(Adam::new(config.weight_decay)),
    }
}

/// Parameters the optimizer updates in `mode`, in a fixed order: `f1`, `fc`,
/// then the similarity heads.
fn trainable(model: &mut SrModel, mode: TrainingMode) -> Vec<&mut Param> {
    let mut v = Vec::new();
    match mode {
        TrainingMode::Baseline | TrainingMode::TwoStage => {
            v.extend(model.f1.params_mut());
            v.extend(model.fc.params_mut());
        }
        TrainingMode::Sr => {
            v.extend(model.f1.params_mut());
            v.extend(model.fc.params_mut());
            v.extend(model.g1.params_mut());
            v.extend(model.p.params_mut());
        }
        TrainingMode::Pretrain => {
            v.extend(model.f1.params_mut());
            v.extend(model.g1.params_mut());
            v.extend(model.p.params_mut());
        }
        TrainingMode::LinearEval => v.extend(model.fc.params_mut()),
    }
    v
}

/// Number of parameters the optimizer updates in `mode`.
pub fn trainable_count(model: &mut SrModel, mode: TrainingMode) -> usize {
    trainable(model, mode).iter().map(|p| p.len()).sum()
}

/// Loss values and upstream gradients for one forward pass.
fn losses_and_grads(
    pass: &[crate::siamese::ViewPass],
    batch: &Batch,
    classes: usize,
    smoothing: f64,
    gamma: f64,
    with_sr: bool,
) -> Result<(LossBreakdown, Vec<ViewGrad>)> {
    let b = batch.labels.len();
    let nv = pass.len();
    let ce_scale = (1.0 - gamma) / (nv * b) as f64;
    let sr_scale = gamma * 0.5 / b as f64;
    let targets = batch
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| match &batch.mix {
            Some((partner, lambda)) => mixed_target(y, partner[i], *lambda, classes),
            None => smoothed_target(y, classes, smoothing),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ce_sum = 0.0;
    let mut sr_sum = 0.0;
    let mut grads = Vec::with_capacity(nv);
    for v in pass {
        let logits = v.logits();
        let mut dl = Tensor::zeros(logits.shape());
        for (i, t) in targets.iter().enumerate() {
            let (loss, g) = cross_entropy_with_logits(logits.row(i), t);
            ce_sum += loss;
            for (d, gv) in dl.row_mut(i).iter_mut().zip(g) {
                *d = gv * ce_scale;
            }
        }
        let mut dpz = None;
        if with_sr {
            let (pz1, z2) = (v.pz1().expect("sr pass"), v.z2().expect("sr pass"));
            let mut d = Tensor::zeros(pz1.shape());
            for i in 0..b {
                let (loss, g) = sr_penalty_grad(pz1.row(i), z2.row(i))?;
                sr_sum += loss;
                for (dv, gv) in d.row_mut(i).iter_mut().zip(g) {
                    *dv = gv * sr_scale;
                }
            }
            dpz = (gamma != 0.0).then_some(d);
        }
        grads.push(ViewGrad {
            logits: (gamma != 1.0).then_some(dl),
            pz1: dpz,
        });
    }
    let ce = ce_sum / (nv * b) as f64;
    let sr = if with_sr { sr_sum * 0.5 / b as f64 } else { 0.0 };
    Ok((combine(ce, sr, gamma)?, grads))
}

/// Drives one training run. Results depend only on the config, the dataset
/// and the initial model, so a run resumed from a checkpoint continues
/// exactly as an uninterrupted one would.
pub struct Trainer {
    pub config: TrainingConfig,
    pub model: SrModel,
    pub optimizer: Optimizer,
    pub iteration: u64,
    pub epoch: usize,
    pub history: TrainingHistory,
    pub best: Option<(f64, usize, SrModel)>,
    data: Prepared,
    pipeline: Pipeline,
    gamma: GammaSchedule,
    order: Option<(usize, Vec<usize>)>,
    epoch_losses: Vec<f64>,
    started: Instant,
    wall_offset: f64,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    /// A fresh run. `two_stage` and `linear_eval` runs should go through
    /// [`Trainer::with_pretrained`].
    pub fn new(config: TrainingConfig, data: &Dataset) -> Result<Self> {
        config.validate_for_run()?;
        let prepared = Prepared::new(data, config.image_size)?;
        let model = init_model(config.model_spec(prepared.classes), config.seed)?;
        Trainer::assemble(config, prepared, model)
    }

    /// A fresh run whose `f1` starts from `pretrained`.
    pub fn with_pretrained(config: TrainingConfig, data: &Dataset, pretrained: &SrModel) -> Result<Self> {
        let mut t = Trainer::new(config, data)?;
        if pretrained.spec.backbone != t.config.backbone {
            return Err(Error::Config(format!(
                "pretrained backbone {} does not match configured backbone {}",
                pretrained.spec.backbone, t.config.backbone
            )));
        }
        copy_state(&mut t.model.f1, &pretrained.f1);
        copy_state(&mut t.model.f2, &pretrained.f1);
        Ok(t)
    }

    /// Replaces the freshly initialized model (custom initializers).
    pub fn with_model(mut self, model: SrModel) -> Result<Self> {
        if model.spec != self.model.spec {
            return Err(Error::Config(format!(
                "model spec {:?} does not match the run {:?}",
                model.spec, self.model.spec
            )));
        }
        self.model = model;
        Ok(self)
    }

    pub fn resume(checkpoint: Checkpoint, data: &Dataset) -> Result<Self> {
        let prepared = Prepared::new(data, checkpoint.config.image_size)?;
        let wall = checkpoint.history.steps.last().map_or(0.0, |s| s.wall);
        let mut t = Trainer::assemble(checkpoint.config, prepared, checkpoint.model)?;
        t.optimizer = checkpoint.optimizer;
        t.iteration = checkpoint.iteration;
        t.epoch = checkpoint.epoch;
        t.history = checkpoint.history;
        t.best = checkpoint.best;
        t.wall_offset = wall;
        Ok(t)
    }

    fn assemble(config: TrainingConfig, data: Prepared, model: SrModel) -> Result<Self> {
        if model.spec.classes != data.classes {
            return Err(Error::Data(format!(
                "model has {} classes, dataset has {}",
                model.spec.classes, data.classes
            )));
        }
        let pipeline = Pipeline::build(config.aug_level)?.with_normalization(data.preprocess.norm);
        let gamma = match config.mode {
            TrainingMode::Sr => config.gamma,
            TrainingMode::Pretrain => GammaSchedule::constant(1.0),
            _ => GammaSchedule::constant(0.0),
        };
        let optimizer = new_optimizer(&config);
        let mut t = Trainer {
            config,
            model,
            optimizer,
            iteration: 0,
            epoch: 0,
            history: TrainingHistory::default(),
            best: None,
            data,
            pipeline,
            gamma,
            order: None,
            epoch_losses: Vec::new(),
            started: Instant::now(),
            wall_offset: 0.0,
            dump_dir: None,
        };
        t.gamma.total_iters = t.total_iters();
        Ok(t)
    }

    /// Directory for the diagnostic dump written when a loss goes non-finite.
    pub fn set_dump_dir(&mut self, dir: &Path) {
        self.dump_dir = Some(dir.to_path_buf());
    }

    pub fn iters_per_epoch(&self) -> usize {
        (self.data.train.len() / self.config.run_batch_size()).max(1)
    }

    pub fn total_iters(&self) -> u64 {
        (self.iters_per_epoch() * self.config.run_epochs()) as u64
    }

    pub fn gamma_schedule(&self) -> GammaSchedule {
        self.gamma
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.run_epochs()
    }

    pub fn preprocess(&self) -> Preprocess {
        self.data.preprocess
    }

    fn views_per_sample(&self) -> usize {
        let m = self.config.mode;
        if m.uses_sr() || (m == TrainingMode::Baseline && self.config.two_view_ce) {
            2
        } else {
            1
        }
    }

    fn epoch_order(&mut self, epoch: usize) -> Vec<usize> {
        if let Some((e, o)) = &self.order {
            if *e == epoch {
                return o.clone();
            }
        }
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut stream(self.config.seed, domain::SHUFFLE, epoch as u64, 0));
        self.order = Some((epoch, order.clone()));
        order
    }

    /// Assembles batch `b` of `epoch` from per-sample augmentation streams.
    pub fn batch(&mut self, epoch: usize, b: usize) -> Result<Batch> {
        let bs = self.config.run_batch_size();
        let order = self.epoch_order(epoch);
        let idx = &order[b * bs..((b + 1) * bs).min(order.len())];
        let nv = self.views_per_sample();
        let aug_seed = self.config.effective_aug_seed();
        let mut views: Vec<Vec<Image>> = vec![Vec::with_capacity(idx.len()); nv];
        let mut labels = Vec::with_capacity(idx.len());
        for &s in idx {
            let (img, label) = &self.data.train[s];
            let mut rng = stream(aug_seed, domain::AUGMENT, epoch as u64, s as u64);
            for v in views.iter_mut() {
                v.push(self.pipeline.apply(img, &mut fork(&mut rng)));
            }
            labels.push(*label);
        }
        let mut mix = None;
        if let Some(mixer) = self.pipeline.mixer() {
            if self.config.mode == TrainingMode::Baseline || self.config.mode == TrainingMode::TwoStage {
                let size = self.config.image_size;
                let plan = mixer.plan(
                    idx.len(),
                    size,
                    size,
                    &mut stream(aug_seed, domain::MIX, epoch as u64, b as u64),
                );
                for v in views.iter_mut() {
                    *v = plan.apply(v);
                }
                mix = Some((plan.partner.iter().map(|&j| labels[j]).collect(), plan.lambda()));
            }
        }
        Ok(Batch {
            views: views.iter().map(|v| stack_images(v)).collect::<Result<_>>()?,
            labels,
            mix,
        })
    }

    /// Forward and backward pass; leaves gradients in the model.
    pub fn compute_gradients(&mut self, batch: &Batch, gamma: f64) -> Result<LossBreakdown> {
        self.model.zero_grad();
        let classes = self.data.classes;
        let smoothing = if batch.mix.is_some() {
            0.0
        } else {
            self.config.label_smoothing
        };
        if self.config.mode == TrainingMode::LinearEval {
            let h = self.model.f1.infer(&batch.views[0])?;
            let logits = self.model.fc.forward(&h)?;
            let pass_batch = Batch {
                views: vec![],
                labels: batch.labels.clone(),
                mix: batch.mix.clone(),
            };
            let (loss, dl) = linear_losses(&logits, &pass_batch, classes, smoothing)?;
            self.model.fc.backward(&h, &dl);
            return Ok(loss);
        }
        let with_sr = self.config.mode.uses_sr();
        let views: Vec<&Tensor> = batch.views.iter().collect();
        let pass = self.model.forward_views(&views, with_sr)?;
        let (loss, grads) = losses_and_grads(&pass, batch, classes, smoothing, gamma, with_sr)?;
        self.model.backward(&pass, &grads);
        Ok(loss)
    }

    /// Loss of a batch without touching gradients or running statistics.
    pub fn evaluate_loss(&mut self, batch: &Batch, gamma: f64, mode: Mode) -> Result<LossBreakdown> {
        let with_sr = self.config.mode.uses_sr();
        let views: Vec<&Tensor> = batch.views.iter().collect();
        let mut model = self.model.clone();
        let pass = model.forward_views_in(&views, with_sr, mode)?;
        let smoothing = if batch.mix.is_some() {
            0.0
        } else {
            self.config.label_smoothing
        };
        Ok(losses_and_grads(&pass, batch, self.data.classes, smoothing, gamma, with_sr)?.0)
    }

    /// Clips, steps the optimizer and applies the momentum update.
    pub fn apply_update(&mut self, lr: f64) {
        let mode = self.config.mode;
        let max_norm = self.config.clip_max_norm;
        let mut params = trainable(&mut self.model, mode);
        {
            let mut grads: Vec<&mut [f64]> = params.iter_mut().map(|p| p.grad.as_mut_slice()).collect();
            clip_gradients(&mut grads, max_norm);
        }
        self.optimizer.update(&mut params, lr);
        if mode.uses_sr() {
            self.model.momentum_update(self.config.beta);
        }
    }

    fn dump_state(&self, batch: &Batch, loss: &LossBreakdown) -> String {
        let Some(dir) = &self.dump_dir else {
            return String::new();
        };
        let mut ar = Archive::new();
        self.model.write_to(&mut ar);
        for (i, v) in batch.views.iter().enumerate() {
            ar.insert_array(format!("batch.view{i}"), v.shape(), v.data());
        }
        ar.insert_text(
            "meta",
            format!(
                "iteration={}\nce={}\nsr={}\ngamma={}\nlabels={:?}\n",
                self.iteration + 1,
                loss.ce,
                loss.sr,
                loss.gamma,
                batch.labels
            ),
        );
        let path = dir.join("nonfinite_dump.sra");
        match std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(dir, e))
            .and_then(|_| ar.save(&path))
        {
            Ok(()) => format!("; state written to {}", path.display()),
            Err(e) => format!("; state dump failed: {e}"),
        }
    }

    /// Runs the next iteration; at the end of an epoch also records
    /// validation accuracy. Returns `None` once the run is complete.
    pub fn step(&mut self) -> Result<Option<StepRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        let ipe = self.iters_per_epoch();
        let b = (self.iteration % ipe as u64) as usize;
        let epoch = self.epoch;
        let batch = self.batch(epoch, b)?;
        let i = self.iteration + 1;
        let gamma = self.gamma.gamma_at(i);
        let lr = self.config.lr_schedule().lr_at(epoch as f64 + b as f64 / ipe as f64);
        let loss = self.compute_gradients(&batch, gamma)?;
        if !(loss.total.is_finite() && loss.ce.is_finite() && loss.sr.is_finite()) {
            let dump = self.dump_state(&batch, &loss);
            return Err(Error::NonFinite {
                iteration: i,
                detail: format!("ce={} sr={} gamma={} lr={lr}{dump}", loss.ce, loss.sr, gamma),
            });
        }
        self.apply_update(lr);
        self.iteration = i;
        let rec = StepRecord {
            iteration: i,
            epoch,
            ce: loss.ce,
            sr: loss.sr,
            gamma,
            lr,
            total: loss.total,
            wall: self.wall(),
        };
        self.history.steps.push(rec);
        self.epoch_losses.push(loss.total);
        if b + 1 == ipe {
            self.finish_epoch()?;
        }
        Ok(Some(rec))
    }

    fn wall(&self) -> f64 {
        self.wall_offset + self.started.elapsed().as_secs_f64()
    }

    fn finish_epoch(&mut self) -> Result<()> {
        let epoch = self.epoch;
        let n = self.epoch_losses.len().max(1) as f64;
        let mean_total = self.epoch_losses.drain(..).sum::<f64>() / n;
        let val_accuracy = if self.data.val.is_empty() {
            None
        } else {
            Some(self.accuracy_on_val()?)
        };
        if let Some(acc) = val_accuracy {
            if self.best.as_ref().is_none_or(|(b, _, _)| acc >= *b) {
                self.best = Some((acc, epoch, self.model.clone()));
            }
        }
        self.history.epochs.push(EpochRecord {
            epoch,
            mean_total,
            val_accuracy,
            wall: self.wall(),
        });
        log::info!(
            "epoch {}/{}: loss {:.4}{}",
            epoch + 1,
            self.config.run_epochs(),
            mean_total,
            val_accuracy.map_or(String::new(), |a| format!(", val accuracy {:.2}%", 100.0 * a))
        );
        self.epoch += 1;
        self.order = None;
        Ok(())
    }

    fn accuracy_on_val(&self) -> Result<f64> {
        let images: Vec<Image> = self.data.val.iter().map(|(i, _)| i.clone()).collect();
        let labels: Vec<usize> = self.data.val.iter().map(|(_, l)| *l).collect();
        let preds = predict_prepared(&self.model, &images)?;
        let cm = confusion(&preds, &labels, self.data.classes)?;
        Ok(cm.trace() as f64 / cm.total() as f64)
    }

    /// Runs whole epochs until `epoch` epochs are complete (or the run ends).
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.epoch < epoch.min(self.config.run_epochs()) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.run_epochs())
    }

    /// Resumable state; meaningful at epoch boundaries.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            iteration: self.iteration,
            epoch: self.epoch,
            history: self.history.clone(),
            best: self.best.clone(),
        }
    }

    pub fn finish(self) -> TrainOutcome {
        let checkpoint = self.checkpoint();
        let (best_model, best_epoch) = match self.best {
            Some((_, e, m)) => (m, Some(e)),
            None => (self.model.clone(), None),
        };
        TrainOutcome {
            preprocess: self.data.preprocess,
            best_model,
            best_epoch,
            history: self.history,
            checkpoint,
        }
    }
}

impl TrainingConfig {
    fn validate_for_run(&self) -> Result<()> {
        let mut c = self.clone();
        // The pretrained path is resolved by the caller for library runs.
        if c.pretrained.is_none() && matches!(c.mode, TrainingMode::TwoStage | TrainingMode::LinearEval) {
            c.pretrained = Some(PathBuf::new());
        }
        c.validate()
    }
}

fn linear_losses(logits: &Tensor, batch: &Batch, classes: usize, smoothing: f64) -> Result<(LossBreakdown, Tensor)> {
    let b = batch.labels.len();
    let mut dl = Tensor::zeros(logits.shape());
    let mut ce = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        let t = match &batch.mix {
            Some((partner, lambda)) => mixed_target(y, partner[i], *lambda, classes)?,
            None => smoothed_target(y, classes, smoothing)?,
        };
        let (loss, g) = cross_entropy_with_logits(logits.row(i), &t);
        ce += loss;
        for (d, gv) in dl.row_mut(i).iter_mut().zip(g) {
            *d = gv / b as f64;
        }
    }
    Ok((combine(ce / b as f64, 0.0, 0.0)?, dl))
}

/// Argmax predictions of the online path for already preprocessed images.
fn predict_prepared(model: &SrModel, images: &[Image]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let x = stack_images(chunk)?;
        let probs = softmax(&model.fc.forward(&model.f1.infer(&x)?)?);
        preds.extend((0..probs.batch()).map(|i| argmax(probs.row(i))));
    }
    Ok(preds)
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the best validation accuracy (the final weights when
    /// there is no validation split). Ties go to the later epoch.
    pub best_model: SrModel,
    pub best_epoch: Option<usize>,
    pub history: TrainingHistory,
    /// Final state.
    pub checkpoint: Checkpoint,
    pub preprocess: Preprocess,
}

impl TrainOutcome {
    /// Writes `final.ckpt`, `best.ckpt`, `model.sri` (best weights, f1 + fc),
    /// `history.jsonl` and `config.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint.save(&dir.join("final.ckpt"))?;
        let mut best = self.checkpoint.clone();
        best.model = self.best_model.clone();
        best.save(&dir.join("best.ckpt"))?;
        self.best_model
            .export_inference(self.preprocess)
            .save(&dir.join("model.sri"))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("history.jsonl", self.history.to_jsonl())?;
        write("config.txt", self.checkpoint.config.to_text())
    }
}

/// Trains in the configured mode (`baseline`, `sr` or `pretrain`).
pub fn train(config: &TrainingConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut t = Trainer::new(config.clone(), data)?;
    t.run()?;
    Ok(t.finish())
}

/// Similarity-only pretraining: constant `gamma = 1`, `fc` left untouched.
pub fn pretrain_contrastive(config: &TrainingConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut c = config.clone();
    c.mode = TrainingMode::Pretrain;
    c.gamma = GammaSchedule {
        strategy: GammaStrategy::Constant,
        gamma0: 1.0,
        ..c.gamma
    };
    train(&c, data)
}

/// Supervised training of the whole network starting from pretrained `f1`.
pub fn two_stage(config: &TrainingConfig, pretrained: &SrModel, data: &Dataset) -> Result<TrainOutcome> {
    let mut c = config.clone();
    c.mode = TrainingMode::TwoStage;
    let mut t = Trainer::with_pretrained(c, data, pretrained)?;
    t.run()?;
    Ok(t.finish())
}

/// Trains only `fc` on top of frozen pretrained `f1` and reports test metrics.
pub fn linear_evaluate(
    config: &TrainingConfig,
    pretrained: &SrModel,
    data: &Dataset,
) -> Result<(TrainOutcome, MetricsReport)> {
    let mut c = config.clone();
    c.mode = TrainingMode::LinearEval;
    let mut t = Trainer::with_pretrained(c, data, pretrained)?;
    t.run()?;
    let out = t.finish();
    let report = evaluate(&out.checkpoint.model, out.preprocess, data, Split::Test)?;
    Ok((out, report))
}

/// Metrics of the online classification path on one split, using the test
/// preprocessing path.
pub fn evaluate(model: &SrModel, preprocess: Preprocess, data: &Dataset, split: Split) -> Result<MetricsReport> {
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::Data(format!("the {split} split is empty")));
    }
    let images: Vec<Image> = samples.iter().map(|s| preprocess.test(&s.image)).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let preds = predict_prepared(model, &images)?;
    Ok(report(&confusion(&preds, &labels, data.num_classes())?)?.with_class_names(&data.class_names))
}

/// Mean symmetric similarity loss over augmented pairs of a split, with
/// batch statistics and no parameter or running-statistic changes.
pub fn heldout_sr_loss(model: &SrModel, data: &Dataset, split: Split, config: &TrainingConfig) -> Result<f64> {
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::Data(format!("the {split} split is empty")));
    }
    let pre = Preprocess::new(config.image_size);
    let pipeline = Pipeline::build(config.aug_level.max(1))?.with_normalization(pre.norm);
    let mut model = model.clone();
    let mut total = 0.0;
    let mut count = 0usize;
    for (c, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
        let mut v1 = Vec::new();
        let mut v2 = Vec::new();
        for (j, s) in chunk.iter().enumerate() {
            let img = pre.resize_train(&s.image);
            let mut rng = stream(config.seed, domain::EVAL, c as u64, j as u64);
            let (a, b) = pipeline.draw_views(&img, &mut rng);
            v1.push(a);
            v2.push(b);
        }
        let (x1, x2) = (stack_images(&v1)?, stack_images(&v2)?);
        let pass = model.forward_views_in(&[&x1, &x2], true, Mode::TrainFrozenStats)?;
        for v in &pass {
            let (pz1, z2) = (v.pz1().expect("sr pass"), v.z2().expect("sr pass"));
            for i in 0..chunk.len() {
                total += 0.5 * crate::losses::sr_penalty(pz1.row(i), z2.row(i))?;
            }
        }
        count += chunk.len();
    }
    Ok(total / count as f64)
}
