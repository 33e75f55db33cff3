//! Incremental augmentation ladder.
//!
//! | level | adds                          |
//! |-------|-------------------------------|
//! | 0     | nothing                       |
//! | 1     | random resized crop           |
//! | 2     | horizontal flip               |
//! | 3     | RandAugment (2 ops, m = 9)    |
//! | 4     | random erasing (p = 0.25)     |
//! | 5     | batch mixup                   |
//! | 6     | mixup or cutmix (p = 0.5)     |
//!
//! Per-sample ops run on `[0, 1]` intensities; normalization is applied just
//! before random erasing (or at the end when there is no erasing), so erased
//! noise lives in normalized units.

mod crop;
mod erasing;
mod mix;
mod randaugment;

pub use crop::{HorizontalFlip, RandomResizedCrop};
pub use erasing::RandomErasing;
pub use mix::{
    cut_region, cutmix_batch, cutmix_plan, draw_partners, mixup_batch, BatchMixer, MixKind, MixPlan, MixedSample,
};
pub use randaugment::{RandAugment, RandOp, MAX_MAGNITUDE};

use std::fmt;

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{fork, Rng};

pub const MAX_LEVEL: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct AugmentationLevel(u8);

impl AugmentationLevel {
    pub fn new(level: u8) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(Error::Config(format!(
                "augmentation level {level} outside 0..={MAX_LEVEL}"
            )));
        }
        Ok(AugmentationLevel(level))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Levels 5 and 6 mix samples and need two-label targets.
    pub fn mixes_batches(self) -> bool {
        self.0 >= 5
    }
}

impl fmt::Display for AugmentationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AugOp {
    RandomResizedCrop(RandomResizedCrop),
    HorizontalFlip(HorizontalFlip),
    RandAugment(RandAugment),
    RandomErasing(RandomErasing),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    RandomResizedCrop,
    HorizontalFlip,
    RandAugment,
    RandomErasing,
}

impl AugOp {
    pub fn kind(&self) -> OpKind {
        match self {
            AugOp::RandomResizedCrop(_) => OpKind::RandomResizedCrop,
            AugOp::HorizontalFlip(_) => OpKind::HorizontalFlip,
            AugOp::RandAugment(_) => OpKind::RandAugment,
            AugOp::RandomErasing(_) => OpKind::RandomErasing,
        }
    }

    pub fn apply(&self, img: &Image, rng: &mut Rng) -> Image {
        match self {
            AugOp::RandomResizedCrop(op) => op.apply(img, rng),
            AugOp::HorizontalFlip(op) => op.apply(img, rng),
            AugOp::RandAugment(op) => op.apply(img, rng),
            AugOp::RandomErasing(op) => op.apply(img, rng),
        }
    }
}

/// Per-sample transform chain plus an optional batch mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    level: Option<AugmentationLevel>,
    ops: Vec<AugOp>,
    mixer: Option<BatchMixer>,
    normalization: Option<Normalization>,
}

impl Pipeline {
    pub fn for_level(level: AugmentationLevel) -> Self {
        let ladder = [
            AugOp::RandomResizedCrop(RandomResizedCrop::default()),
            AugOp::HorizontalFlip(HorizontalFlip::default()),
            AugOp::RandAugment(RandAugment::default()),
            AugOp::RandomErasing(RandomErasing::default()),
        ];
        let n = level.get().min(4) as usize;
        let mixer = match level.get() {
            5 => Some(BatchMixer::Mixup),
            6 => Some(BatchMixer::MixupOrCutmix {
                cutmix_probability: 0.5,
            }),
            _ => None,
        };
        Pipeline {
            level: Some(level),
            ops: ladder[..n].to_vec(),
            mixer,
            normalization: None,
        }
    }

    pub fn build(level: u8) -> Result<Self> {
        Ok(Pipeline::for_level(AugmentationLevel::new(level)?))
    }

    /// A pipeline outside the ladder (used for tests and previews).
    pub fn custom(ops: Vec<AugOp>) -> Self {
        Pipeline {
            level: None,
            ops,
            mixer: None,
            normalization: None,
        }
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Self {
        self.normalization = Some(norm);
        self
    }

    pub fn level(&self) -> Option<AugmentationLevel> {
        self.level
    }

    pub fn ops(&self) -> &[AugOp] {
        &self.ops
    }

    pub fn kinds(&self) -> Vec<OpKind> {
        self.ops.iter().map(AugOp::kind).collect()
    }

    pub fn mixer(&self) -> Option<&BatchMixer> {
        self.mixer.as_ref()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Runs the per-sample chain on a `[0, 1]` image.
    pub fn apply(&self, img: &Image, rng: &mut Rng) -> Image {
        let mut out = img.clone();
        let mut normalized = false;
        for op in &self.ops {
            if op.kind() == OpKind::RandomErasing && !normalized {
                out = self.normalize(out);
                normalized = true;
            }
            out = op.apply(&out, rng);
        }
        if !normalized {
            out = self.normalize(out);
        }
        out
    }

    fn normalize(&self, img: Image) -> Image {
        match &self.normalization {
            Some(n) => n.normalize(&img),
            None => img,
        }
    }

    /// Two views from independent sub-streams of `rng`. No level check.
    pub fn draw_views(&self, img: &Image, rng: &mut Rng) -> (Image, Image) {
        let mut r1 = fork(rng);
        let mut r2 = fork(rng);
        (self.apply(img, &mut r1), self.apply(img, &mut r2))
    }
}

/// Mix metadata carried by a view pair when batch mixing was applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixInfo {
    pub partner_label: usize,
    pub lambda: f64,
}

/// Two independently augmented views of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub v1: Image,
    pub v2: Image,
    pub mix: Option<MixInfo>,
}

/// Draws a positive pair for similarity training. Level 0 yields identical
/// views and is rejected.
pub fn augment_pair(img: &Image, pipeline: &Pipeline, rng: &mut Rng) -> Result<ViewPair> {
    if pipeline.level().is_some_and(|l| l.get() == 0) {
        return Err(Error::Config(
            "similarity training needs augmentation level >= 1 to produce distinct views".into(),
        ));
    }
    let (v1, v2) = pipeline.draw_views(img, rng);
    Ok(ViewPair { v1, v2, mix: None })
}
