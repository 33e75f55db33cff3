use super::{Buffer, Mode, Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Batch normalization over the channel axis of `[n, c]` or `[n, c, h, w]` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    channels: usize,
}

/// Values the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::filled(format!("{name}.gamma"), &[channels], 1.0),
            beta: Param::filled(format!("{name}.beta"), &[channels], 0.0),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                shape: vec![channels],
                value: vec![0.0; channels],
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                shape: vec![channels],
                value: vec![1.0; channels],
            },
            channels,
        }
    }

    fn layout(&self, x: &Tensor) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() < 2 || s[1] != self.channels {
            return Err(Error::Domain(format!(
                "batch norm {} expects {} channels, got {s:?}",
                self.gamma.name, self.channels
            )));
        }
        Ok((s[0], s[2..].iter().product()))
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BnCache)> {
        let (n, spatial) = self.layout(x)?;
        let c = self.channels;
        let count = (n * spatial) as f64;
        let batch_stats = mode != Mode::Eval;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for i in 0..n {
                for (ch, m) in mean.iter_mut().enumerate() {
                    *m += x.data()[(i * c + ch) * spatial..][..spatial].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for i in 0..n {
                for ch in 0..c {
                    var[ch] += x.data()[(i * c + ch) * spatial..][..spatial]
                        .iter()
                        .map(|v| (v - mean[ch]) * (v - mean[ch]))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            if mode == Mode::Train {
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for ch in 0..c {
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (1.0 - MOMENTUM) * *rm + MOMENTUM * mean[ch];
                    let rv = &mut self.running_var.value[ch];
                    *rv = (1.0 - MOMENTUM) * *rv + MOMENTUM * var[ch] * unbias;
                }
            }
            (mean, var)
        } else {
            (self.running_mean.value.clone(), self.running_var.value.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
        let mut x_hat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * spatial;
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for p in off..off + spatial {
                    let h = (x.data()[p] - mean[ch]) * inv_std[ch];
                    x_hat.data_mut()[p] = h;
                    y.data_mut()[p] = g * h + b;
                }
            }
        }
        Ok((
            y,
            BnCache {
                x_hat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// Evaluation-mode normalization with running statistics. Matches
    /// `forward(x, Mode::Eval)` bit for bit without needing `&mut self`.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (n, spatial) = self.layout(x)?;
        let c = self.channels;
        let mut y = Tensor::zeros(x.shape());
        for ch in 0..c {
            let mean = self.running_mean.value[ch];
            let inv_std = 1.0 / (self.running_var.value[ch] + EPS).sqrt();
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..n {
                let off = (i * c + ch) * spatial;
                for p in off..off + spatial {
                    y.data_mut()[p] = g * ((x.data()[p] - mean) * inv_std) + b;
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let (n, spatial) = (dy.shape()[0], dy.shape()[2..].iter().product::<usize>());
        let c = self.channels;
        let count = (n * spatial) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * spatial;
                for p in off..off + spatial {
                    sum_dy[ch] += dy.data()[p];
                    sum_dy_xhat[ch] += dy.data()[p] * cache.x_hat.data()[p];
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += sum_dy_xhat[ch];
            self.beta.grad[ch] += sum_dy[ch];
        }
        let mut dx = Tensor::zeros(dy.shape());
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * spatial;
                let scale = self.gamma.value[ch] * cache.inv_std[ch];
                for p in off..off + spatial {
                    dx.data_mut()[p] = if cache.batch_stats {
                        scale * (dy.data()[p] - sum_dy[ch] / count - cache.x_hat.data()[p] * sum_dy_xhat[ch] / count)
                    } else {
                        scale * dy.data()[p]
                    };
                }
            }
        }
        dx
    }
}

impl Parameterized for BatchNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}
