//! Minimal CPU network stack with hand-written backward passes.
//!
//! Layers are stateless with respect to activations: `forward` returns the
//! values the matching `backward` needs, so one layer can be run on several
//! inputs (two augmented views) before any gradient flows. Gradients
//! accumulate into [`Param::grad`] until [`Parameterized::zero_grad`].

mod conv;
mod linear;
mod norm;

pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm, BnCache};

use rand::Rng as _;

use crate::rng::Rng;
use crate::tensor::Tensor;

/// A trainable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad,
        }
    }

    /// Uniform initialization on `[-bound, bound]`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Param::new(name, shape, value)
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: f64) -> Self {
        Param::new(name, shape, vec![v; shape.iter().product()])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// How normalization layers treat batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and update running statistics.
    Train,
    /// Normalize with batch statistics, leave running statistics untouched.
    TrainFrozenStats,
    /// Normalize with running statistics.
    Eval,
}

pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn buffers(&self) -> Vec<&Buffer> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.params().iter().map(|p| p.shape.clone()).collect()
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient of ReLU given its output.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

/// `[n, c, h, w] -> [n, c]` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Tensor::zeros(&[n, c]);
    for (o, chunk) in out.data_mut().iter_mut().zip(x.data().chunks(hw)) {
        *o = chunk.iter().sum::<f64>() / hw as f64;
    }
    out
}

pub fn global_avg_pool_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c) = (dy.shape()[0], dy.shape()[1]);
    let hw = h * w;
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (chunk, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        chunk.iter_mut().for_each(|v| *v = g / hw as f64);
    }
    dx
}

/// Row-wise softmax of `[n, k]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let k = logits.row_len();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]).unwrap();
        let p = softmax(&x);
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_backward_spreads_evenly() {
        let dy = Tensor::from_vec(&[1, 2], vec![4.0, 8.0]).unwrap();
        let dx = global_avg_pool_backward(&dy, 2, 2);
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}
