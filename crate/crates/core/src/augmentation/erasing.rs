use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::image::{Image, Rect};
use crate::rng::Rng;

/// Replace a random rectangle with per-pixel standard-normal noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomErasing {
    pub probability: f64,
    /// Rectangle area as a fraction of the image area.
    pub area: (f64, f64),
    /// Height/width ratio range, sampled log-uniformly.
    pub ratio: (f64, f64),
    pub attempts: usize,
}

impl Default for RandomErasing {
    fn default() -> Self {
        RandomErasing {
            probability: 0.25,
            area: (0.02, 1.0 / 3.0),
            ratio: (0.3, 1.0 / 0.3),
            attempts: 10,
        }
    }
}

impl RandomErasing {
    /// Draws the gate and, if it passes, the rectangle to erase.
    pub fn sample_rect(&self, height: usize, width: usize, rng: &mut Rng) -> Option<Rect> {
        if rng.random::<f64>() >= self.probability {
            return None;
        }
        let area = (height * width) as f64;
        let (log_lo, log_hi) = (self.ratio.0.ln(), self.ratio.1.ln());
        for _ in 0..self.attempts {
            let target = area * rng.random_range(self.area.0..=self.area.1);
            let aspect = rng.random_range(log_lo..=log_hi).exp();
            let h = (target * aspect).sqrt().round() as usize;
            let w = (target / aspect).sqrt().round() as usize;
            if h > 0 && w > 0 && h < height && w < width {
                let y = rng.random_range(0..=height - h);
                let x = rng.random_range(0..=width - w);
                return Some(Rect {
                    x,
                    y,
                    width: w,
                    height: h,
                });
            }
        }
        None
    }

    /// Returns the output and the erased rectangle, if any.
    pub fn apply_traced(&self, img: &Image, rng: &mut Rng) -> (Image, Option<Rect>) {
        let Some(r) = self.sample_rect(img.height(), img.width(), rng) else {
            return (img.clone(), None);
        };
        let mut out = img.clone();
        for c in 0..img.channels() {
            for y in r.y..r.y + r.height {
                for x in r.x..r.x + r.width {
                    out.set(c, y, x, rng.sample(StandardNormal));
                }
            }
        }
        (out, Some(r))
    }

    pub fn apply(&self, img: &Image, rng: &mut Rng) -> Image {
        self.apply_traced(img, rng).0
    }
}
