//! Parameter and FLOP accounting. FLOPs are counted as 2 × multiply-
//! accumulates of convolutions and matrix products; normalization,
//! activations and softmax exponentials are not counted.

use serde::{Deserialize, Serialize};

use crate::collab::{AUFormer, Expert};
use crate::params::NamedTensors;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub learnable: usize,
    pub frozen: usize,
    pub ratio: f64,
}

pub fn count_params<T: Scalar>(model: &AUFormer<T>) -> ParamCount {
    let learnable = model.learnable.numel();
    let frozen = model.backbone.numel();
    ParamCount {
        learnable,
        frozen,
        ratio: learnable as f64 / (learnable + frozen) as f64,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub backbone: u64,
    pub experts: u64,
    pub heads: u64,
    pub total: u64,
    /// Expert FLOPs as a percentage of backbone FLOPs.
    pub expert_overhead_pct: f64,
}

/// MACs of a stride-1 `k×k` convolution over `positions` output positions.
pub fn conv_macs(positions: u64, c_in: u64, c_out: u64, k: u64) -> u64 {
    positions * c_in * c_out * k * k
}

fn expert_macs<T: Scalar>(e: &Expert<T>, n_tokens: u64, dim: u64, neighborhood: u64) -> u64 {
    match e {
        Expert::Moke(p) => {
            // the grid and the [CLS] map together cover N_t positions
            let d = p.reduced() as u64;
            let mut macs = conv_macs(n_tokens, dim, d, 1) + conv_macs(n_tokens, d, d, 3) + conv_macs(n_tokens, d, dim, 1);
            if let Some(m) = &p.mrf {
                let k = m.branches.len() as u64;
                macs += k * conv_macs(n_tokens, d, d, 3) + conv_macs(n_tokens, k * d, d, 1);
            }
            if p.ca.is_some() {
                let s2 = neighborhood * neighborhood;
                macs += 3 * conv_macs(n_tokens, d, d, 1) + 2 * n_tokens * d * s2;
            }
            macs
        }
        Expert::Bottleneck(b) => 2 * n_tokens * dim * b.down.out_dim() as u64,
        Expert::LowRank(l) => 2 * n_tokens * dim * l.a.dim(0) as u64,
    }
}

pub fn estimate_flops<T: Scalar>(model: &AUFormer<T>) -> FlopReport {
    let v = &model.config.vit;
    let (nt, np, d) = (v.num_tokens() as u64, v.num_patches() as u64, v.dim as u64);
    let hidden = v.mlp_hidden() as u64;
    let patch = np * d * (v.in_chans * v.patch_size * v.patch_size) as u64;
    let block = 4 * nt * d * d + 2 * nt * nt * d + 2 * nt * d * hidden;
    let backbone = 2 * (patch + v.depth as u64 * block);
    let s = model.config.moke.neighborhood as u64;
    let experts = 2 * model
        .learnable
        .groups
        .iter()
        .flat_map(|g| &g.experts)
        .map(|e| expert_macs(e, nt, d, s))
        .sum::<u64>();
    let n = model.config.num_aus as u64;
    let heads = 2 * (d * n + model.learnable.aux_heads.len() as u64 * d);
    FlopReport {
        backbone,
        experts,
        heads,
        total: backbone + experts + heads,
        expert_overhead_pct: 100.0 * experts as f64 / backbone as f64,
    }
}
