//! First-order optimizers over flat parameter lists.
//!
//! State is indexed by position in the parameter list, so callers must pass
//! the same parameters in the same order on every step.

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::nn::Param;

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Param], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2_sqrt = (1.0 - self.beta2.powi(self.step as i32)).sqrt();
        let step_size = lr / bc1;
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i] + self.weight_decay * p.value[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + self.eps;
                p.value[i] -= step_size * m[i] / denom;
            }
        }
    }
}

/// SGD with heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub step: u64,
    buf: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            step: 0,
            buf: Vec::new(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Param], lr: f64) {
        let first = self.buf.is_empty();
        if first {
            self.buf = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        for (p, b) in params.iter_mut().zip(&mut self.buf) {
            for i in 0..p.value.len() {
                let g = p.grad[i] + self.weight_decay * p.value[i];
                b[i] = if first { g } else { self.momentum * b[i] + g };
                p.value[i] -= lr * b[i];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn update(&mut self, params: &mut [&mut Param], lr: f64) {
        match self {
            Optimizer::Adam(o) => o.update(params, lr),
            Optimizer::Sgd(o) => o.update(params, lr),
        }
    }

    pub fn steps(&self) -> u64 {
        match self {
            Optimizer::Adam(o) => o.step,
            Optimizer::Sgd(o) => o.step,
        }
    }

    pub fn write_to(&self, ar: &mut Archive) {
        let (kind, step, slots): (&str, u64, Vec<(&str, &Vec<Vec<f64>>)>) = match self {
            Optimizer::Adam(o) => ("adam", o.step, vec![("m", &o.m), ("v", &o.v)]),
            Optimizer::Sgd(o) => ("sgd", o.step, vec![("buf", &o.buf)]),
        };
        ar.insert_text("optim.kind", kind);
        ar.insert_text("optim.step", step.to_string());
        for (slot, vecs) in slots {
            ar.insert_text(format!("optim.{slot}.count"), vecs.len().to_string());
            for (i, v) in vecs.iter().enumerate() {
                ar.insert_array(format!("optim.{slot}.{i:04}"), &[v.len()], v);
            }
        }
    }

    /// Restores state into an optimizer of the same kind with matching hyperparameters.
    pub fn read_from(&mut self, ar: &Archive) -> Result<()> {
        let read_slot = |slot: &str| -> Result<Vec<Vec<f64>>> {
            let count: usize = ar
                .text(&format!("optim.{slot}.count"))?
                .parse()
                .map_err(|_| Error::Format(format!("bad optimizer slot count for {slot:?}")))?;
            (0..count)
                .map(|i| ar.array(&format!("optim.{slot}.{i:04}")).map(|(_, d)| d.to_vec()))
                .collect()
        };
        let step: u64 = ar
            .text("optim.step")?
            .parse()
            .map_err(|_| Error::Format("bad optimizer step".into()))?;
        let kind = ar.text("optim.kind")?;
        match (self, kind) {
            (Optimizer::Adam(o), "adam") => {
                o.m = read_slot("m")?;
                o.v = read_slot("v")?;
                o.step = step;
            }
            (Optimizer::Sgd(o), "sgd") => {
                o.buf = read_slot("buf")?;
                o.step = step;
            }
            (_, other) => {
                return Err(Error::Format(format!(
                    "checkpoint optimizer {other:?} does not match the run"
                )))
            }
        }
        Ok(())
    }
}
