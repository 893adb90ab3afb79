use serde::{Deserialize, Serialize};

use crate::collab::Learnable;
use crate::params::NamedTensors;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adamw,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW with bias correction and decoupled weight decay on every
/// learnable tensor.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    m: Learnable<T>,
    v: Learnable<T>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &Learnable<T>, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut Learnable<T>, grads: &Learnable<T>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 / (1.0 - BETA1.powi(t));
        let c2 = 1.0 / (1.0 - BETA2.powi(t));
        let (b1, b2) = (T::of(BETA1), T::of(BETA2));
        let (one_b1, one_b2) = (T::of(1.0 - BETA1), T::of(1.0 - BETA2));
        let (lr, wd, eps) = (T::of(self.lr), T::of(self.weight_decay), T::of(ADAM_EPS));
        let (c1, c2) = (T::of(c1), T::of(c2));
        let slots = params
            .named_mut("")
            .into_iter()
            .zip(grads.named(""))
            .zip(self.m.named_mut("").into_iter().zip(self.v.named_mut("")));
        for (((_, p), (_, g)), ((_, m), (_, v))) in slots {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((p, &g), (m, v)) in it {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let update = (*m * c1) / ((*v * c2).sqrt() + eps);
                *p = *p - lr * (update + wd * *p);
            }
        }
    }
}
