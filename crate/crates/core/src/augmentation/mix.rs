//! Batch-level sample mixing (mixup and cutmix).
//!
//! Mixing is split into a random [`MixPlan`] and its deterministic
//! application, so the same plan can be applied to both views of a batch.

use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::image::{Image, Rect};
use crate::rng::Rng;

/// One mixed training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub image: Image,
    pub label_a: usize,
    pub label_b: usize,
    /// Weight of `label_a` in the mixed target.
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MixKind {
    /// Pixelwise `λ·A + (1 − λ)·B`.
    Mixup { lambda: f64 },
    /// `region` of each image replaced by its partner's pixels.
    Cutmix { region: Rect, lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    /// `partner[i]` is the batch index mixed into sample `i`.
    pub partner: Vec<usize>,
    pub kind: MixKind,
}

impl MixPlan {
    /// Effective weight of each sample's own label.
    pub fn lambda(&self) -> f64 {
        match self.kind {
            MixKind::Mixup { lambda } | MixKind::Cutmix { lambda, .. } => lambda,
        }
    }

    pub fn apply(&self, images: &[Image]) -> Vec<Image> {
        images
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let b = &images[self.partner[i]];
                match self.kind {
                    MixKind::Mixup { lambda } => {
                        let mut out = a.clone();
                        for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
                            *o = lambda * *o + (1.0 - lambda) * bv;
                        }
                        out
                    }
                    MixKind::Cutmix { region, .. } => {
                        let mut out = a.clone();
                        for c in 0..a.channels() {
                            for y in region.y..region.y + region.height {
                                for x in region.x..region.x + region.width {
                                    out.set(c, y, x, b.get(c, y, x));
                                }
                            }
                        }
                        out
                    }
                }
            })
            .collect()
    }

    pub fn apply_labeled(&self, batch: &[(Image, usize)]) -> Vec<MixedSample> {
        let images: Vec<Image> = batch.iter().map(|(img, _)| img.clone()).collect();
        self.apply(&images)
            .into_iter()
            .enumerate()
            .map(|(i, image)| MixedSample {
                image,
                label_a: batch[i].1,
                label_b: batch[self.partner[i]].1,
                lambda: self.lambda(),
            })
            .collect()
    }
}

/// Random cyclic permutation (Sattolo), so no sample is its own partner
/// unless the batch has a single element.
pub fn draw_partners(batch: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..batch).collect();
    for i in (1..batch).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

fn beta11(rng: &mut Rng) -> f64 {
    Beta::new(1.0, 1.0).expect("valid beta parameters").sample(rng)
}

/// Square cut region of side `round(size·sqrt(cut_fraction))` centered at
/// `(cy, cx)`, clipped at the borders.
pub fn cut_region(height: usize, width: usize, cut_fraction: f64, cy: usize, cx: usize) -> Rect {
    let root = cut_fraction.clamp(0.0, 1.0).sqrt();
    let sh = (height as f64 * root).round() as isize;
    let sw = (width as f64 * root).round() as isize;
    let y0 = (cy as isize - sh / 2).clamp(0, height as isize);
    let x0 = (cx as isize - sw / 2).clamp(0, width as isize);
    let y1 = (cy as isize - sh / 2 + sh).clamp(0, height as isize);
    let x1 = (cx as isize - sw / 2 + sw).clamp(0, width as isize);
    Rect {
        x: x0 as usize,
        y: y0 as usize,
        width: (x1 - x0) as usize,
        height: (y1 - y0) as usize,
    }
}

/// Cutmix plan with explicit draws; λ is the realized uncovered fraction.
pub fn cutmix_plan(
    partner: Vec<usize>,
    height: usize,
    width: usize,
    cut_fraction: f64,
    cy: usize,
    cx: usize,
) -> MixPlan {
    let region = cut_region(height, width, cut_fraction, cy, cx);
    let lambda = 1.0 - (region.width * region.height) as f64 / (height * width) as f64;
    MixPlan {
        partner,
        kind: MixKind::Cutmix { region, lambda },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchMixer {
    Mixup,
    /// Cutmix with `cutmix_probability`, mixup otherwise.
    MixupOrCutmix {
        cutmix_probability: f64,
    },
}

impl BatchMixer {
    pub fn plan(&self, batch: usize, height: usize, width: usize, rng: &mut Rng) -> MixPlan {
        let use_cutmix = match *self {
            BatchMixer::Mixup => false,
            BatchMixer::MixupOrCutmix { cutmix_probability } => rng.random_bool(cutmix_probability),
        };
        let partner = draw_partners(batch, rng);
        if use_cutmix {
            let cut = beta11(rng);
            let cy = rng.random_range(0..height);
            let cx = rng.random_range(0..width);
            cutmix_plan(partner, height, width, cut, cy, cx)
        } else {
            MixPlan {
                partner,
                kind: MixKind::Mixup { lambda: beta11(rng) },
            }
        }
    }
}

fn batch_dims(batch: &[(Image, usize)]) -> (usize, usize) {
    batch.first().map_or((0, 0), |(img, _)| (img.height(), img.width()))
}

/// Mixup with λ ~ Beta(1, 1) drawn once for the batch.
pub fn mixup_batch(batch: &[(Image, usize)], rng: &mut Rng) -> Vec<MixedSample> {
    let (h, w) = batch_dims(batch);
    BatchMixer::Mixup.plan(batch.len(), h, w, rng).apply_labeled(batch)
}

/// Cutmix with the cut fraction ~ Beta(1, 1) drawn once for the batch.
pub fn cutmix_batch(batch: &[(Image, usize)], rng: &mut Rng) -> Vec<MixedSample> {
    let (h, w) = batch_dims(batch);
    BatchMixer::MixupOrCutmix {
        cutmix_probability: 1.0,
    }
    .plan(batch.len(), h, w, rng)
    .apply_labeled(batch)
}
