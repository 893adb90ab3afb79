//! Reference adapters used as baselines against MoKE: a bottleneck adapter
//! and a low-rank (LoRA-style) residual branch. Both read the same site
//! input as a MoKE expert and start from a zero output.

use crate::layers::Linear;
use crate::params::{join, NamedTensors};
use crate::tensor::{gelu, gelu_grad, gemm, seeded_init, Init, Scalar, SeedStream, Tensor};

const INIT_STD: f64 = 0.02;

/// `s · up(GELU(down(x)))` with a zero-initialized `up`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck<T> {
    pub down: Linear<T>,
    pub up: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct BottleneckCache<T> {
    input: Tensor<T>,
    pre_act: Tensor<T>,
    hidden: Tensor<T>,
}

impl<T: Scalar> Bottleneck<T> {
    pub fn init(dim: usize, rank: usize, seeds: &mut SeedStream) -> Self {
        Self {
            down: Linear::init(rank, dim, Init::TruncNormal { std: INIT_STD }, seeds.next_seed()),
            up: Linear::zeros(dim, rank),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            down: self.down.zeros_like(),
            up: self.up.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, scale: f64) -> (Tensor<T>, BottleneckCache<T>) {
        let pre_act = self.down.forward(x);
        let hidden = pre_act.map(gelu);
        let out = self.up.forward(&hidden).scale(T::of(scale));
        (
            out,
            BottleneckCache {
                input: x.clone(),
                pre_act,
                hidden,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BottleneckCache<T>,
        scale: f64,
        grad_out: &Tensor<T>,
        grads: &mut Self,
    ) -> Tensor<T> {
        let g = grad_out.scale(T::of(scale));
        self.up.accumulate_grads(&cache.hidden, &g, &mut grads.up);
        let mut gh = self.up.backward_input(&g);
        for (v, &a) in gh.data_mut().iter_mut().zip(cache.pre_act.data()) {
            *v = *v * gelu_grad(a);
        }
        self.down.accumulate_grads(&cache.input, &gh, &mut grads.down);
        self.down.backward_input(&gh)
    }
}

impl<T: Scalar> NamedTensors<T> for Bottleneck<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.down.visit(&join(prefix, "down"), out);
        self.up.visit(&join(prefix, "up"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.down.visit_mut(&join(prefix, "down"), out);
        self.up.visit_mut(&join(prefix, "up"), out);
    }
}

/// Bias-free low-rank branch `s · x·Aᵀ·Bᵀ`, `A: [r, D]`, `B: [D, r]`, `B = 0`
/// at init.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRank<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LowRankCache<T> {
    input: Tensor<T>,
    hidden: Tensor<T>,
}

impl<T: Scalar> LowRank<T> {
    pub fn init(dim: usize, rank: usize, seeds: &mut SeedStream) -> Self {
        Self {
            a: seeded_init(&[rank, dim], Init::TruncNormal { std: INIT_STD }, seeds.next_seed()),
            b: Tensor::zeros(&[dim, rank]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            a: Tensor::zeros(self.a.shape()),
            b: Tensor::zeros(self.b.shape()),
        }
    }

    fn rank(&self) -> usize {
        self.a.dim(0)
    }

    fn dim(&self) -> usize {
        self.a.dim(1)
    }

    pub fn forward(&self, x: &Tensor<T>, scale: f64) -> (Tensor<T>, LowRankCache<T>) {
        let (n, r, d) = (x.dim(0), self.rank(), self.dim());
        let mut hidden = vec![T::zero(); n * r];
        gemm(n, d, r, x.data(), false, self.a.data(), true, &mut hidden, false);
        let mut out = vec![T::zero(); n * d];
        gemm(n, r, d, &hidden, false, self.b.data(), true, &mut out, false);
        let out = Tensor::new(&[n, d], out).expect("low-rank output").scale(T::of(scale));
        let hidden = Tensor::new(&[n, r], hidden).expect("low-rank hidden");
        (
            out,
            LowRankCache {
                input: x.clone(),
                hidden,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &LowRankCache<T>,
        scale: f64,
        grad_out: &Tensor<T>,
        grads: &mut Self,
    ) -> Tensor<T> {
        let (n, r, d) = (grad_out.dim(0), self.rank(), self.dim());
        let g = grad_out.scale(T::of(scale));
        // dB += gᵀ·h, dh = g·B, dA += dhᵀ·x, dx = dh·A
        gemm(d, n, r, g.data(), true, cache.hidden.data(), false, grads.b.data_mut(), true);
        let mut gh = vec![T::zero(); n * r];
        gemm(n, d, r, g.data(), false, self.b.data(), false, &mut gh, false);
        gemm(r, n, d, &gh, true, cache.input.data(), false, grads.a.data_mut(), true);
        let mut gx = vec![T::zero(); n * d];
        gemm(n, r, d, &gh, false, self.a.data(), false, &mut gx, false);
        Tensor::new(&[n, d], gx).expect("low-rank grad")
    }
}

impl<T: Scalar> NamedTensors<T> for LowRank<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "a"), &self.a));
        out.push((join(prefix, "b"), &self.b));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "a"), &mut self.a));
        out.push((join(prefix, "b"), &mut self.b));
    }
}
