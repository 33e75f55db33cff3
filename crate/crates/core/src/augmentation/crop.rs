use rand::Rng as _;

use crate::image::{Filter, Image, Rect};
use crate::rng::Rng;

/// Crop a random area/aspect sub-rectangle and resize it back to the input size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomResizedCrop {
    /// Fraction of the image area to keep.
    pub scale: (f64, f64),
    /// Width/height ratio range, sampled log-uniformly.
    pub ratio: (f64, f64),
    pub attempts: usize,
}

impl Default for RandomResizedCrop {
    fn default() -> Self {
        RandomResizedCrop {
            scale: (0.08, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            attempts: 10,
        }
    }
}

impl RandomResizedCrop {
    pub fn sample_rect(&self, height: usize, width: usize, rng: &mut Rng) -> Rect {
        let area = (height * width) as f64;
        let (log_lo, log_hi) = (self.ratio.0.ln(), self.ratio.1.ln());
        for _ in 0..self.attempts {
            let target = area * rng.random_range(self.scale.0..=self.scale.1);
            let aspect = rng.random_range(log_lo..=log_hi).exp();
            let w = (target * aspect).sqrt().round() as usize;
            let h = (target / aspect).sqrt().round() as usize;
            if w > 0 && h > 0 && w <= width && h <= height {
                let y = rng.random_range(0..=height - h);
                let x = rng.random_range(0..=width - w);
                return Rect {
                    x,
                    y,
                    width: w,
                    height: h,
                };
            }
        }
        // Center crop with the aspect ratio clamped into range.
        let in_ratio = width as f64 / height as f64;
        let (w, h) = if in_ratio < self.ratio.0 {
            (width, ((width as f64 / self.ratio.0).round() as usize).clamp(1, height))
        } else if in_ratio > self.ratio.1 {
            (
                ((height as f64 * self.ratio.1).round() as usize).clamp(1, width),
                height,
            )
        } else {
            (width, height)
        };
        Rect {
            x: (width - w) / 2,
            y: (height - h) / 2,
            width: w,
            height: h,
        }
    }

    pub fn apply(&self, img: &Image, rng: &mut Rng) -> Image {
        let rect = self.sample_rect(img.height(), img.width(), rng);
        img.resample(rect, img.height(), img.width(), Filter::Bilinear)
    }
}

/// Mirror left-right with fixed probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizontalFlip {
    pub probability: f64,
}

impl Default for HorizontalFlip {
    fn default() -> Self {
        HorizontalFlip { probability: 0.5 }
    }
}

impl HorizontalFlip {
    /// Returns the output and whether a flip was drawn.
    pub fn apply_traced(&self, img: &Image, rng: &mut Rng) -> (Image, bool) {
        if rng.random_bool(self.probability) {
            (img.flip_horizontal(), true)
        } else {
            (img.clone(), false)
        }
    }

    pub fn apply(&self, img: &Image, rng: &mut Rng) -> Image {
        self.apply_traced(img, rng).0
    }
}
