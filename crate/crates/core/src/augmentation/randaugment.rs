//! RandAugment: a fixed number of photometric/geometric ops drawn uniformly
//! from an op set, each applied at a jittered global magnitude.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::image::Image;
use crate::rng::Rng;

/// Magnitudes are expressed on a `[0, MAX_MAGNITUDE]` scale.
pub const MAX_MAGNITUDE: f64 = 10.0;
const FILL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandOp {
    Identity,
    AutoContrast,
    Equalize,
    Rotate,
    Solarize,
    Color,
    Posterize,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Invert,
}

impl RandOp {
    pub const ALL: [RandOp; 15] = [
        RandOp::Identity,
        RandOp::AutoContrast,
        RandOp::Equalize,
        RandOp::Rotate,
        RandOp::Solarize,
        RandOp::Color,
        RandOp::Posterize,
        RandOp::Contrast,
        RandOp::Brightness,
        RandOp::Sharpness,
        RandOp::ShearX,
        RandOp::ShearY,
        RandOp::TranslateX,
        RandOp::TranslateY,
        RandOp::Invert,
    ];

    pub fn is_geometric(self) -> bool {
        matches!(
            self,
            RandOp::Rotate | RandOp::ShearX | RandOp::ShearY | RandOp::TranslateX | RandOp::TranslateY
        )
    }

    /// Applies the op at `magnitude`. Signed ops draw their direction from `rng`.
    pub fn apply(self, img: &Image, magnitude: f64, rng: &mut Rng) -> Image {
        let level = magnitude / MAX_MAGNITUDE;
        let mut signed = |v: f64| if rng.random_bool(0.5) { -v } else { v };
        let mut out = match self {
            RandOp::Identity => img.clone(),
            RandOp::AutoContrast => auto_contrast(img),
            RandOp::Equalize => equalize(img),
            RandOp::Invert => img.map(|v| 1.0 - v),
            RandOp::Solarize => {
                let t = 1.0 - level;
                img.map(|v| if v > t { 1.0 - v } else { v })
            }
            RandOp::Posterize => posterize(img, 8 - (level * 4.0).floor() as u32),
            RandOp::Color => color(img, 1.0 + signed(0.9 * level)),
            RandOp::Contrast => contrast(img, 1.0 + signed(0.9 * level)),
            RandOp::Brightness => {
                let f = 1.0 + signed(0.9 * level);
                img.map(|v| v * f)
            }
            RandOp::Sharpness => sharpness(img, 1.0 + signed(0.9 * level)),
            RandOp::Rotate => {
                let theta = signed(level * 30.0).to_radians();
                let (s, c) = theta.sin_cos();
                let (cy, cx) = center(img);
                affine(img, theta == 0.0, |y, x| {
                    let (dy, dx) = (y - cy, x - cx);
                    (cy - s * dx + c * dy, cx + c * dx + s * dy)
                })
            }
            RandOp::ShearX => {
                let k = signed(0.3 * level);
                let (cy, _) = center(img);
                affine(img, k == 0.0, |y, x| (y, x + k * (y - cy)))
            }
            RandOp::ShearY => {
                let k = signed(0.3 * level);
                let (_, cx) = center(img);
                affine(img, k == 0.0, |y, x| (y + k * (x - cx), x))
            }
            RandOp::TranslateX => {
                let t = signed(0.45 * level) * img.width() as f64;
                affine(img, t == 0.0, |y, x| (y, x + t))
            }
            RandOp::TranslateY => {
                let t = signed(0.45 * level) * img.height() as f64;
                affine(img, t == 0.0, |y, x| (y + t, x))
            }
        };
        out.clamp01();
        out
    }
}

fn center(img: &Image) -> (f64, f64) {
    ((img.height() as f64 - 1.0) / 2.0, (img.width() as f64 - 1.0) / 2.0)
}

/// Inverse-maps every output pixel through `src` and samples bilinearly,
/// filling with mid-gray outside the image.
fn affine(img: &Image, identity: bool, src: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    if identity {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let at = |c: usize, y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            FILL
        } else {
            img.get(c, y as usize, x as usize)
        }
    };
    Image::from_fn(img.channels(), h, w, |c, y, x| {
        let (sy, sx) = src(y as f64, x as f64);
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        (1.0 - fy) * ((1.0 - fx) * at(c, y0, x0) + fx * at(c, y0, x0 + 1))
            + fy * ((1.0 - fx) * at(c, y0 + 1, x0) + fx * at(c, y0 + 1, x0 + 1))
    })
}

fn auto_contrast(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels() {
        let plane = out.plane_mut(c);
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            plane.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        }
    }
    out
}

fn quantize(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Per-channel histogram equalization over 256 levels.
fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels() {
        let plane = out.plane_mut(c);
        let mut hist = [0usize; 256];
        plane.iter().for_each(|&v| hist[quantize(v)] += 1);
        let last = hist.iter().rev().find(|&&n| n > 0).copied().unwrap_or(0);
        let step = (plane.len() - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0.0; 256];
        let mut acc = step / 2;
        for (l, &n) in lut.iter_mut().zip(&hist) {
            *l = (acc / step).min(255) as f64 / 255.0;
            acc += n;
        }
        plane.iter_mut().for_each(|v| *v = lut[quantize(*v)]);
    }
    out
}

fn posterize(img: &Image, bits: u32) -> Image {
    if bits >= 8 {
        return img.clone();
    }
    let mask = !((1u32 << (8 - bits)) - 1) & 0xff;
    img.map(|v| ((quantize(v) as u32) & mask) as f64 / 255.0)
}

fn grayscale(img: &Image) -> Vec<f64> {
    if img.channels() < 3 {
        return img.plane(0).to_vec();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len())
        .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
        .collect()
}

fn blend(base: &Image, degenerate: impl Fn(usize, usize) -> f64, factor: f64) -> Image {
    let n = base.height() * base.width();
    let mut out = base.clone();
    for c in 0..base.channels() {
        for (i, v) in out.plane_mut(c).iter_mut().enumerate() {
            let d = degenerate(c, i);
            *v = d + factor * (*v - d);
        }
        debug_assert_eq!(out.plane(c).len(), n);
    }
    out
}

fn color(img: &Image, factor: f64) -> Image {
    let gray = grayscale(img);
    blend(img, |_, i| gray[i], factor)
}

fn contrast(img: &Image, factor: f64) -> Image {
    let gray = grayscale(img);
    let mean = gray.iter().sum::<f64>() / gray.len() as f64;
    blend(img, |_, _| mean, factor)
}

/// Blend with a 3×3 smoothed copy (center weight 5); border pixels are kept.
fn sharpness(img: &Image, factor: f64) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut smooth = img.clone();
    for c in 0..img.channels() {
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let mut acc = 4.0 * img.get(c, y, x);
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += img.get(c, y + dy - 1, x + dx - 1);
                    }
                }
                smooth.set(c, y, x, acc / 13.0);
            }
        }
    }
    blend(img, |c, i| smooth.plane(c)[i], factor)
}

/// Applies `num_ops` ops drawn uniformly from `ops`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandAugment {
    pub ops: Vec<RandOp>,
    pub num_ops: usize,
    pub magnitude: f64,
    pub magnitude_std: f64,
}

impl Default for RandAugment {
    fn default() -> Self {
        RandAugment {
            ops: RandOp::ALL.to_vec(),
            num_ops: 2,
            magnitude: 9.0,
            magnitude_std: 0.5,
        }
    }
}

impl RandAugment {
    /// Magnitude for one application: Gaussian jitter around the base, clipped.
    pub fn draw_magnitude(&self, rng: &mut Rng) -> f64 {
        let m = if self.magnitude_std > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            self.magnitude + self.magnitude_std * z
        } else {
            self.magnitude
        };
        m.clamp(0.0, MAX_MAGNITUDE)
    }

    pub fn apply(&self, img: &Image, rng: &mut Rng) -> Image {
        let mut out = img.clone();
        if self.ops.is_empty() {
            return out;
        }
        for _ in 0..self.num_ops {
            let op = self.ops[rng.random_range(0..self.ops.len())];
            let m = self.draw_magnitude(rng);
            out = op.apply(&out, m, rng);
        }
        out
    }
}
