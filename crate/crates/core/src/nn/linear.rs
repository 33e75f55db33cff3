use super::{Param, Parameterized};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};

/// Affine map `y = x·Wᵀ + b` over `[n, in]` batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            weight: Param::uniform(format!("{name}.weight"), &[out_dim, in_dim], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[out_dim], bound, rng),
            in_dim,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::Domain(format!(
                "linear layer {} expects [n, {}], got {:?}",
                self.weight.name,
                self.in_dim,
                x.shape()
            )));
        }
        let n = x.shape()[0];
        let mut y = Tensor::zeros(&[n, self.out_dim]);
        for row in y.data_mut().chunks_mut(self.out_dim) {
            row.copy_from_slice(&self.bias.value);
        }
        gemm(
            n,
            self.in_dim,
            self.out_dim,
            x.data(),
            false,
            &self.weight.value,
            true,
            1.0,
            y.data_mut(),
        );
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let n = x.shape()[0];
        gemm(
            self.out_dim,
            n,
            self.in_dim,
            dy.data(),
            true,
            x.data(),
            false,
            1.0,
            &mut self.weight.grad,
        );
        for row in dy.data().chunks(self.out_dim) {
            for (g, v) in self.bias.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        let mut dx = Tensor::zeros(&[n, self.in_dim]);
        gemm(
            n,
            self.out_dim,
            self.in_dim,
            dy.data(),
            false,
            &self.weight.value,
            false,
            0.0,
            dx.data_mut(),
        );
        dx
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{assert_close, central_diff};
    use crate::rng::seeded;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded(3);
        let mut lin = Linear::new("l", 4, 3, &mut rng);
        let x = Tensor::from_vec(&[2, 4], (0..8).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let coef: Vec<f64> = (0..6).map(|i| (i as f64 * 0.3).cos()).collect();
        let loss = |y: &Tensor| y.data().iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>();

        let dy = Tensor::from_vec(&[2, 3], coef.clone()).unwrap();
        let dx = lin.backward(&x, &dy);

        let probe = lin.clone();
        let num_dx = central_diff(
            &mut |xs| loss(&probe.forward(&Tensor::from_vec(&[2, 4], xs.to_vec()).unwrap()).unwrap()),
            x.data(),
            1e-6,
        );
        assert_close(dx.data(), &num_dx, 1e-6);

        let num_dw = central_diff(
            &mut |w| {
                let mut l = probe.clone();
                l.weight.value = w.to_vec();
                loss(&l.forward(&x).unwrap())
            },
            &probe.weight.value,
            1e-6,
        );
        assert_close(&lin.weight.grad, &num_dw, 1e-6);
    }

    #[test]
    fn rejects_wrong_width() {
        let lin = Linear::new("l", 4, 3, &mut seeded(0));
        assert!(lin.forward(&Tensor::zeros(&[2, 5])).is_err());
    }
}
