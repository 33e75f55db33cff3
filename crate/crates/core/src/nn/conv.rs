use super::{Param, Parameterized};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

const K: usize = 3;

/// 3×3 convolution with unit padding and no bias (always followed by batch norm).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    in_ch: usize,
    out_ch: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = in_ch * K * K;
        let bound = (6.0 / fan_in as f64).sqrt();
        Conv2d {
            weight: Param::uniform(format!("{name}.weight"), &[out_ch, fan_in], bound, rng),
            in_ch,
            out_ch,
            stride,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 - K) / self.stride + 1, (w + 2 - K) / self.stride + 1)
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, cols: &mut [f64]) {
        let (oh, ow) = self.out_size(h, w);
        let ohw = oh * ow;
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..K {
                for kx in 0..K {
                    let row = &mut cols[((c * K + ky) * K + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        let out = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in out.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            *v = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let (oh, ow) = self.out_size(h, w);
        let ohw = oh * ow;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..K {
                for kx in 0..K {
                    let row = &cols[((c * K + ky) * K + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &g) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_ch {
            return Err(Error::Domain(format!(
                "conv {} expects [n, {}, h, w], got {s:?}",
                self.weight.name, self.in_ch
            )));
        }
        Ok((s[0], s[2], s[3]))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, h, w) = self.check(x)?;
        let (oh, ow) = self.out_size(h, w);
        let ohw = oh * ow;
        let fan_in = self.in_ch * K * K;
        let mut cols = vec![0.0; fan_in * ohw];
        let mut y = Tensor::zeros(&[n, self.out_ch, oh, ow]);
        for i in 0..n {
            self.im2col(x.row(i), h, w, &mut cols);
            gemm(
                self.out_ch,
                fan_in,
                ohw,
                &self.weight.value,
                false,
                &cols,
                false,
                0.0,
                y.row_mut(i),
            );
        }
        Ok(y)
    }

    /// Accumulates the weight gradient; returns `dL/dx` when `input_grad` is set.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, input_grad: bool) -> Option<Tensor> {
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (oh, ow) = self.out_size(h, w);
        let ohw = oh * ow;
        let fan_in = self.in_ch * K * K;
        let mut cols = vec![0.0; fan_in * ohw];
        let mut dx = input_grad.then(|| Tensor::zeros(x.shape()));
        for i in 0..n {
            self.im2col(x.row(i), h, w, &mut cols);
            gemm(
                self.out_ch,
                ohw,
                fan_in,
                dy.row(i),
                false,
                &cols,
                true,
                1.0,
                &mut self.weight.grad,
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    fan_in,
                    self.out_ch,
                    ohw,
                    &self.weight.value,
                    true,
                    dy.row(i),
                    false,
                    0.0,
                    &mut cols,
                );
                self.col2im(&cols, h, w, dx.row_mut(i));
            }
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight]
    }
}
