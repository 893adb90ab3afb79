//! Linear and LayerNorm layers with hand-written adjoints.

use crate::params::{join, NamedTensors};
use crate::tensor::{gemm, seeded_init, Init, Scalar, Tensor};

/// `y = x·Wᵀ + b` with `weight: [out, in]`, `bias: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    /// Weights from `init`, zero bias.
    pub fn init(out_dim: usize, in_dim: usize, init: Init, seed: u64) -> Self {
        Self {
            weight: seeded_init(&[out_dim, in_dim], init, seed),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.out_dim(), self.in_dim())
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }

    /// `x: [n, in]` → `[n, out]`.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, out) = (x.dim(0), self.out_dim());
        let mut y = Vec::with_capacity(n * out);
        for _ in 0..n {
            y.extend_from_slice(self.bias.data());
        }
        gemm(n, self.in_dim(), out, x.data(), false, self.weight.data(), true, &mut y, true);
        Tensor::new(&[n, out], y).expect("linear output")
    }

    /// Gradient with respect to the input, `g·W`.
    pub fn backward_input(&self, grad_out: &Tensor<T>) -> Tensor<T> {
        let n = grad_out.dim(0);
        let mut gx = vec![T::zero(); n * self.in_dim()];
        gemm(n, self.out_dim(), self.in_dim(), grad_out.data(), false, self.weight.data(), false, &mut gx, false);
        Tensor::new(&[n, self.in_dim()], gx).expect("linear grad")
    }

    /// Accumulates `dW += gᵀ·x`, `db += Σ_rows g`.
    pub fn accumulate_grads(&self, x: &Tensor<T>, grad_out: &Tensor<T>, grads: &mut Self) {
        let n = x.dim(0);
        gemm(
            self.out_dim(),
            n,
            self.in_dim(),
            grad_out.data(),
            true,
            x.data(),
            false,
            grads.weight.data_mut(),
            true,
        );
        let out = self.out_dim();
        let gb = grads.bias.data_mut();
        for r in 0..n {
            for (b, &g) in gb.iter_mut().zip(&grad_out.data()[r * out..(r + 1) * out]) {
                *b = *b + g;
            }
        }
    }
}

impl<T: Scalar> NamedTensors<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

pub const LN_EPS: f64 = 1e-6;

/// Per-row normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LnCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            weight: Tensor::full(&[dim], T::one()),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, LnCache<T>) {
        let (n, d) = (x.dim(0), x.dim(1));
        let inv_d = T::of(1.0 / d as f64);
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            let yr = y.row_mut(r);
            for j in 0..d {
                yr[j] = xhat.row(r)[j] * self.weight.data()[j] + self.bias.data()[j];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    /// Input gradient only; the layer's own parameters are never trained here.
    pub fn backward(&self, cache: &LnCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        let (n, d) = (grad_out.dim(0), grad_out.dim(1));
        let inv_d = T::of(1.0 / d as f64);
        let mut gx = Tensor::zeros(grad_out.shape());
        let mut gxh = vec![T::zero(); d];
        for r in 0..n {
            let g = grad_out.row(r);
            let xh = cache.xhat.row(r);
            for j in 0..d {
                gxh[j] = g[j] * self.weight.data()[j];
            }
            let mean_g = gxh.iter().copied().sum::<T>() * inv_d;
            let mean_gx = gxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
            let rs = cache.rstd[r];
            for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                *o = rs * (gxh[j] - mean_g - xh[j] * mean_gx);
            }
        }
        gx
    }
}

impl<T: Scalar> NamedTensors<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}
