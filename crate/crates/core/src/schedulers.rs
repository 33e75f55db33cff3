//! Loss-weight (γ) schedules, the learning-rate schedule, and gradient clipping.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaStrategy {
    Constant,
    Linear,
    Cosine,
}

impl fmt::Display for GammaStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GammaStrategy::Constant => "constant",
            GammaStrategy::Linear => "linear",
            GammaStrategy::Cosine => "cosine",
        })
    }
}

impl FromStr for GammaStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(GammaStrategy::Constant),
            "linear" => Ok(GammaStrategy::Linear),
            "cosine" => Ok(GammaStrategy::Cosine),
            other => Err(Error::Config(format!("unknown gamma strategy {other:?}"))),
        }
    }
}

/// Weight of the similarity term per optimizer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSchedule {
    pub strategy: GammaStrategy,
    /// Value used by the constant strategy.
    pub gamma0: f64,
    pub gamma_min: f64,
    /// Total number of optimizer iterations.
    pub total_iters: u64,
}

impl Default for GammaSchedule {
    fn default() -> Self {
        GammaSchedule {
            strategy: GammaStrategy::Constant,
            gamma0: 0.5,
            gamma_min: 0.01,
            total_iters: 1,
        }
    }
}

impl GammaSchedule {
    pub fn constant(gamma: f64) -> Self {
        GammaSchedule {
            gamma0: gamma,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma0) || !(0.0..=1.0).contains(&self.gamma_min) {
            return Err(Error::Config(format!(
                "gamma values must lie in [0, 1] (value {}, min {})",
                self.gamma0, self.gamma_min
            )));
        }
        Ok(())
    }

    /// γ at iteration `i`; iterations past the horizon stay at the minimum.
    pub fn gamma_at(&self, i: u64) -> f64 {
        let n = self.total_iters.max(1);
        if self.strategy == GammaStrategy::Constant {
            return self.gamma0;
        }
        if i >= n {
            return self.gamma_min;
        }
        let frac = i as f64 / n as f64;
        let shape = match self.strategy {
            GammaStrategy::Linear => 1.0 - frac,
            GammaStrategy::Cosine => 0.5 * (1.0 + (frac * PI).cos()),
            GammaStrategy::Constant => unreachable!(),
        };
        self.gamma_min + shape * (1.0 - self.gamma_min)
    }
}

/// Linear warmup followed by cosine decay, indexed by (fractional) epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup_epochs: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub total_epochs: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            warmup_epochs: 5.0,
            lr_start: 5e-7,
            lr_peak: 5e-4,
            lr_end: 5e-7,
            total_epochs: 50.0,
        }
    }
}

impl LrSchedule {
    /// Cosine decay with no warmup, used when fitting a classifier on a
    /// frozen encoder. `unscaled` selects a peak of 40; the default
    /// preset is three orders of magnitude smaller.
    pub fn linear_eval(total_epochs: f64, unscaled: bool) -> Self {
        let (peak, end) = if unscaled { (40.0, 4e-6) } else { (4e-2, 4e-9) };
        LrSchedule {
            warmup_epochs: 0.0,
            lr_start: peak,
            lr_peak: peak,
            lr_end: end,
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_start > 0.0
            && self.lr_peak > 0.0
            && self.lr_end > 0.0
            && self.warmup_epochs >= 0.0
            && self.total_epochs >= self.warmup_epochs;
        if !ok {
            return Err(Error::Config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: f64) -> f64 {
        let epoch = epoch.clamp(0.0, self.total_epochs);
        if epoch < self.warmup_epochs {
            let t = epoch / self.warmup_epochs;
            return self.lr_start + t * (self.lr_peak - self.lr_start);
        }
        let span = self.total_epochs - self.warmup_epochs;
        if span <= 0.0 {
            return self.lr_peak;
        }
        let t = (epoch - self.warmup_epochs) / span;
        self.lr_end + 0.5 * (1.0 + (PI * t).cos()) * (self.lr_peak - self.lr_end)
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(strategy: GammaStrategy) -> GammaSchedule {
        GammaSchedule {
            strategy,
            gamma0: 0.5,
            gamma_min: 0.01,
            total_iters: 100,
        }
    }

    #[test]
    fn gamma_endpoints_and_midpoint() {
        for s in [GammaStrategy::Linear, GammaStrategy::Cosine] {
            let g = decay(s);
            assert_eq!(g.gamma_at(0), 1.0);
            assert!((g.gamma_at(100) - 0.01).abs() < 1e-12);
            assert!((g.gamma_at(50) - 0.505).abs() < 1e-12);
            assert_eq!(g.gamma_at(1000), 0.01);
        }
        assert_eq!(decay(GammaStrategy::Constant).gamma_at(77), 0.5);
    }

    #[test]
    fn lr_endpoints() {
        let s = LrSchedule::default();
        assert!((s.lr_at(0.0) - 5e-7).abs() < 1e-12);
        assert!((s.lr_at(5.0) - 5e-4).abs() < 1e-12);
        assert!((s.lr_at(50.0) - 5e-7).abs() < 1e-12);
        assert!((s.lr_at(5.0 - 1e-9) - s.lr_at(5.0)).abs() < 1e-9);
    }

    #[test]
    fn clipping_examples() {
        let mut a = vec![1.2, 1.6];
        clip_gradients(&mut [&mut a], 5.0);
        assert_eq!(a, vec![1.2, 1.6]);

        let mut a = vec![6.0, 0.0];
        let mut b = vec![8.0];
        let n = clip_gradients(&mut [&mut a, &mut b], 5.0);
        assert_eq!(n, 10.0);
        assert_eq!(a, vec![3.0, 0.0]);
        assert_eq!(b, vec![4.0]);

        let mut z = vec![0.0; 3];
        clip_gradients(&mut [&mut z], 5.0);
        assert_eq!(z, vec![0.0; 3]);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [GammaStrategy::Constant, GammaStrategy::Linear, GammaStrategy::Cosine] {
            assert_eq!(s.to_string().parse::<GammaStrategy>().unwrap(), s);
        }
        assert!("step".parse::<GammaStrategy>().is_err());
    }
}
