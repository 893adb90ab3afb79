//! A small pre-norm Vision Transformer used as the frozen backbone.
//!
//! Blocks compute `x' = x + MHSA(LN1(x))`, `x_out = x' + MLP(LN2(x'))`, with
//! optional additive injections at both residual points. Only input
//! gradients are propagated through the backbone; its parameters are never
//! updated.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format;
use crate::layers::{LayerNorm, Linear, LnCache};
use crate::params::{join, NamedTensors};
use crate::tensor::{gelu, gelu_grad, gemm, seeded_init, Init, Scalar, SeedStream, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            in_chans: 1,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.in_chans == 0 || self.mlp_hidden() == 0 {
            return Err(Error::config("depth, in_chans and mlp width must be positive"));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock<T> {
    pub ln1: LayerNorm<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> TransformerBlock<T> {
    fn init(cfg: &ViTConfig, seeds: &mut SeedStream) -> Self {
        let d = cfg.dim;
        let hidden = cfg.mlp_hidden();
        let fan = |n: usize| Init::TruncNormal {
            std: 1.0 / (n as f64).sqrt(),
        };
        Self {
            ln1: LayerNorm::new(d),
            wq: Linear::init(d, d, fan(d), seeds.next_seed()),
            wk: Linear::init(d, d, fan(d), seeds.next_seed()),
            wv: Linear::init(d, d, fan(d), seeds.next_seed()),
            wo: Linear::init(d, d, fan(d), seeds.next_seed()),
            ln2: LayerNorm::new(d),
            fc1: Linear::init(hidden, d, fan(d), seeds.next_seed()),
            fc2: Linear::init(d, hidden, fan(hidden), seeds.next_seed()),
            heads: cfg.heads,
        }
    }

    fn zeroed(cfg: &ViTConfig) -> Self {
        let d = cfg.dim;
        let hidden = cfg.mlp_hidden();
        Self {
            ln1: LayerNorm::new(d),
            wq: Linear::zeros(d, d),
            wk: Linear::zeros(d, d),
            wv: Linear::zeros(d, d),
            wo: Linear::zeros(d, d),
            ln2: LayerNorm::new(d),
            fc1: Linear::zeros(hidden, d),
            fc2: Linear::zeros(d, hidden),
            heads: cfg.heads,
        }
    }
}

impl<T: Scalar> NamedTensors<T> for TransformerBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.ln1.visit(&join(prefix, "ln1"), out);
        self.wq.visit(&join(prefix, "attn.q"), out);
        self.wk.visit(&join(prefix, "attn.k"), out);
        self.wv.visit(&join(prefix, "attn.v"), out);
        self.wo.visit(&join(prefix, "attn.proj"), out);
        self.ln2.visit(&join(prefix, "ln2"), out);
        self.fc1.visit(&join(prefix, "mlp.fc1"), out);
        self.fc2.visit(&join(prefix, "mlp.fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.ln1.visit_mut(&join(prefix, "ln1"), out);
        self.wq.visit_mut(&join(prefix, "attn.q"), out);
        self.wk.visit_mut(&join(prefix, "attn.k"), out);
        self.wv.visit_mut(&join(prefix, "attn.v"), out);
        self.wo.visit_mut(&join(prefix, "attn.proj"), out);
        self.ln2.visit_mut(&join(prefix, "ln2"), out);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), out);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), out);
    }
}

/// Intermediate values of one MHSA call, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MhsaCache<T> {
    pub ln: LnCache<T>,
    pub normed: Tensor<T>,
    q: Vec<Vec<T>>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Row-stochastic attention matrix per head, `[N_t, N_t]`.
    pub attn: Vec<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    pub ln: LnCache<T>,
    pub normed: Tensor<T>,
    pre_act: Tensor<T>,
}

fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize) -> Vec<Vec<T>> {
    let (n, d) = (x.dim(0), x.dim(1));
    let dh = d / heads;
    (0..heads)
        .map(|h| {
            let mut out = Vec::with_capacity(n * dh);
            for r in 0..n {
                out.extend_from_slice(&x.row(r)[h * dh..(h + 1) * dh]);
            }
            out
        })
        .collect()
}

fn merge_heads<T: Scalar>(parts: &[Vec<T>], n: usize, d: usize) -> Tensor<T> {
    let heads = parts.len();
    let dh = d / heads;
    let mut out = Tensor::zeros(&[n, d]);
    for (h, part) in parts.iter().enumerate() {
        for r in 0..n {
            out.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(&part[r * dh..(r + 1) * dh]);
        }
    }
    out
}

/// `MHSA(LN1(x))`; the residual is added by the caller.
pub fn mhsa_forward<T: Scalar>(x: &Tensor<T>, block: &TransformerBlock<T>) -> Tensor<T> {
    mhsa_forward_cached(x, block).0
}

pub fn mhsa_forward_cached<T: Scalar>(
    x: &Tensor<T>,
    block: &TransformerBlock<T>,
) -> (Tensor<T>, MhsaCache<T>) {
    let (n, d) = (x.dim(0), x.dim(1));
    let heads = block.heads;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let (normed, ln) = block.ln1.forward(x);
    let q = split_heads(&block.wq.forward(&normed), heads);
    let k = split_heads(&block.wk.forward(&normed), heads);
    let v = split_heads(&block.wv.forward(&normed), heads);
    let mut attn = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut scores = vec![T::zero(); n * n];
        gemm(n, dh, n, &q[h], false, &k[h], true, &mut scores, false);
        for row in scores.chunks_exact_mut(n) {
            let max = row
                .iter()
                .fold(T::neg_infinity(), |m, &s| m.max(s * scale));
            let mut total = T::zero();
            for s in row.iter_mut() {
                *s = (*s * scale - max).exp();
                total = total + *s;
            }
            for s in row.iter_mut() {
                *s = *s / total;
            }
        }
        let mut o = vec![T::zero(); n * dh];
        gemm(n, n, dh, &scores, false, &v[h], false, &mut o, false);
        attn.push(scores);
        outs.push(o);
    }
    let concat = merge_heads(&outs, n, d);
    let out = block.wo.forward(&concat);
    (
        out,
        MhsaCache {
            ln,
            normed,
            q,
            k,
            v,
            attn,
        },
    )
}

/// Gradient of `MHSA(LN1(x))` with respect to `x`.
pub fn mhsa_backward<T: Scalar>(
    block: &TransformerBlock<T>,
    cache: &MhsaCache<T>,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (n, d) = (grad_out.dim(0), grad_out.dim(1));
    let heads = block.heads;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let g_concat = split_heads(&block.wo.backward_input(grad_out), heads);
    let (mut gq, mut gk, mut gv) = (Vec::new(), Vec::new(), Vec::new());
    for h in 0..heads {
        let a = &cache.attn[h];
        let go = &g_concat[h];
        // dA = dO · Vᵀ, dV = Aᵀ · dO
        let mut ga = vec![T::zero(); n * n];
        gemm(n, dh, n, go, false, &cache.v[h], true, &mut ga, false);
        let mut gvh = vec![T::zero(); n * dh];
        gemm(n, n, dh, a, true, go, false, &mut gvh, false);
        // softmax adjoint, then the 1/sqrt(dh) scale
        for (ga_row, a_row) in ga.chunks_exact_mut(n).zip(a.chunks_exact(n)) {
            let dot = ga_row
                .iter()
                .zip(a_row)
                .fold(T::zero(), |acc, (&g, &p)| acc + g * p);
            for (g, &p) in ga_row.iter_mut().zip(a_row) {
                *g = p * (*g - dot) * scale;
            }
        }
        let mut gqh = vec![T::zero(); n * dh];
        gemm(n, n, dh, &ga, false, &cache.k[h], false, &mut gqh, false);
        let mut gkh = vec![T::zero(); n * dh];
        gemm(n, n, dh, &ga, true, &cache.q[h], false, &mut gkh, false);
        gq.push(gqh);
        gk.push(gkh);
        gv.push(gvh);
    }
    let mut g_normed = block.wq.backward_input(&merge_heads(&gq, n, d));
    g_normed.add_assign(&block.wk.backward_input(&merge_heads(&gk, n, d)));
    g_normed.add_assign(&block.wv.backward_input(&merge_heads(&gv, n, d)));
    block.ln1.backward(&cache.ln, &g_normed)
}

/// `MLP(LN2(x))`; the residual is added by the caller.
pub fn mlp_forward<T: Scalar>(x: &Tensor<T>, block: &TransformerBlock<T>) -> Tensor<T> {
    mlp_forward_cached(x, block).0
}

pub fn mlp_forward_cached<T: Scalar>(
    x: &Tensor<T>,
    block: &TransformerBlock<T>,
) -> (Tensor<T>, MlpCache<T>) {
    let (normed, ln) = block.ln2.forward(x);
    let pre_act = block.fc1.forward(&normed);
    let out = block.fc2.forward(&pre_act.map(gelu));
    (
        out,
        MlpCache {
            ln,
            normed,
            pre_act,
        },
    )
}

pub fn mlp_backward<T: Scalar>(
    block: &TransformerBlock<T>,
    cache: &MlpCache<T>,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut g = block.fc2.backward_input(grad_out);
    for (gv, &a) in g.data_mut().iter_mut().zip(cache.pre_act.data()) {
        *gv = *gv * gelu_grad(a);
    }
    let g_normed = block.fc1.backward_input(&g);
    block.ln2.backward(&cache.ln, &g_normed)
}

/// One block with optional additive injections at the two residual points:
/// `x_mid = x + MHSA(x) + inject_mhsa`, `x_out = x_mid + MLP(x_mid) + inject_mlp`.
pub fn block_forward<T: Scalar>(
    x: &Tensor<T>,
    block: &TransformerBlock<T>,
    inject_mhsa: Option<&Tensor<T>>,
    inject_mlp: Option<&Tensor<T>>,
) -> (Tensor<T>, Tensor<T>) {
    let mut x_mid = x.add(&mhsa_forward(x, block));
    if let Some(k) = inject_mhsa {
        x_mid.add_assign(k);
    }
    let mut x_out = x_mid.add(&mlp_forward(&x_mid, block));
    if let Some(k) = inject_mlp {
        x_out.add_assign(k);
    }
    (x_mid, x_out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub config: ViTConfig,
    /// `[D, C, p, p]`, applied with stride `p`.
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    pub cls_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<TransformerBlock<T>>,
}

impl<T: Scalar> Backbone<T> {
    /// Seeded random backbone.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut seeds = SeedStream::new(seed);
        let (d, c, p) = (config.dim, config.in_chans, config.patch_size);
        let patch_weight = seeded_init(
            &[d, c, p, p],
            Init::TruncNormal {
                std: 1.0 / ((c * p * p) as f64).sqrt(),
            },
            seeds.next_seed(),
        );
        let cls_token = seeded_init(&[1, d], Init::TruncNormal { std: 0.02 }, seeds.next_seed());
        let pos_embed = seeded_init(
            &[config.num_tokens(), d],
            Init::TruncNormal { std: 0.02 },
            seeds.next_seed(),
        );
        let blocks = (0..config.depth)
            .map(|_| TransformerBlock::init(config, &mut seeds))
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_weight,
            patch_bias: Tensor::zeros(&[d]),
            cls_token,
            pos_embed,
            blocks,
        })
    }

    /// All-zero weights (unit LayerNorm scale); a template for loading.
    pub fn zeroed(config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let (d, c, p) = (config.dim, config.in_chans, config.patch_size);
        Ok(Self {
            config: config.clone(),
            patch_weight: Tensor::zeros(&[d, c, p, p]),
            patch_bias: Tensor::zeros(&[d]),
            cls_token: Tensor::zeros(&[1, d]),
            pos_embed: Tensor::zeros(&[config.num_tokens(), d]),
            blocks: (0..config.depth)
                .map(|_| TransformerBlock::zeroed(config))
                .collect(),
        })
    }

    /// `[C, H, W]` image → `[N_t, D]` tokens: `[CLS]` first, then patches in
    /// row-major order, plus positional embedding.
    pub fn patch_embed(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let expected = [cfg.in_chans, cfg.image_size, cfg.image_size];
        if image.shape() != expected {
            return Err(Error::Dimension(format!(
                "image must be {expected:?}, got {:?}",
                image.shape()
            )));
        }
        let (p, g, c, d) = (cfg.patch_size, cfg.grid_side(), cfg.in_chans, cfg.dim);
        let s = cfg.image_size;
        let cols = c * p * p;
        let mut patches = vec![T::zero(); g * g * cols];
        for py in 0..g {
            for px in 0..g {
                let row = &mut patches[(py * g + px) * cols..(py * g + px + 1) * cols];
                for ch in 0..c {
                    for i in 0..p {
                        let src = (ch * s + py * p + i) * s + px * p;
                        row[(ch * p + i) * p..(ch * p + i + 1) * p]
                            .copy_from_slice(&image.data()[src..src + p]);
                    }
                }
            }
        }
        let mut emb = Vec::with_capacity(g * g * d);
        for _ in 0..g * g {
            emb.extend_from_slice(self.patch_bias.data());
        }
        gemm(g * g, cols, d, &patches, false, self.patch_weight.data(), true, &mut emb, true);
        let mut tokens = Vec::with_capacity(cfg.num_tokens() * d);
        tokens.extend_from_slice(self.cls_token.data());
        tokens.extend_from_slice(&emb);
        let mut tokens = Tensor::new(&[cfg.num_tokens(), d], tokens)?;
        tokens.add_assign(&self.pos_embed);
        Ok(tokens)
    }

    /// Plain forward pass without injections; returns the final tokens.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = self.patch_embed(image)?;
        for block in &self.blocks {
            x = block_forward(&x, block, None, None).1;
        }
        Ok(x)
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        format::save_tensors(path, &self.named(""))
    }

    /// Load weights written by [`Backbone::save_weights`]; every tensor must
    /// match the shapes implied by `config`.
    pub fn load_weights(path: &Path, config: &ViTConfig) -> Result<Self> {
        let tensors = format::load_tensors::<T>(path)?;
        let mut model = Self::zeroed(config)?;
        assign_named(&mut model, "", tensors)?;
        Ok(model)
    }
}

/// Copy loaded tensors into a template, checking names and shapes.
pub(crate) fn assign_named<T: Scalar, M: NamedTensors<T>>(
    model: &mut M,
    prefix: &str,
    tensors: Vec<(String, Tensor<T>)>,
) -> Result<()> {
    let mut slots = model.named_mut(prefix);
    if slots.len() != tensors.len() {
        return Err(Error::Dimension(format!(
            "expected {} tensors, file has {}",
            slots.len(),
            tensors.len()
        )));
    }
    for ((name, slot), (fname, t)) in slots.iter_mut().zip(tensors) {
        if *name != fname {
            return Err(Error::format(format!(
                "expected tensor {name}, found {fname}"
            )));
        }
        if slot.shape() != t.shape() {
            return Err(Error::Dimension(format!(
                "{name}: expected shape {:?}, file has {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        **slot = t;
    }
    Ok(())
}

impl<T: Scalar> NamedTensors<T> for Backbone<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((join(prefix, "patch_embed.weight"), &self.patch_weight));
        out.push((join(prefix, "patch_embed.bias"), &self.patch_bias));
        out.push((join(prefix, "cls_token"), &self.cls_token));
        out.push((join(prefix, "pos_embed"), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((join(prefix, "patch_embed.weight"), &mut self.patch_weight));
        out.push((join(prefix, "patch_embed.bias"), &mut self.patch_bias));
        out.push((join(prefix, "cls_token"), &mut self.cls_token));
        out.push((join(prefix, "pos_embed"), &mut self.pos_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
    }
}
