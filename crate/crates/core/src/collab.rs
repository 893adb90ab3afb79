//! Expert groups around the frozen backbone.
//!
//! Each block carries one group at its MHSA site and one at its MLP site.
//! With collaboration on, a group holds one expert per AU and expert `i`
//! reads the site input plus the knowledge its predecessor in chain `i`
//! produced (zero before the first group). The group output is the mean of
//! its experts' knowledge and is added at the site's residual point.
//!
//! With collaboration off, or with a reference adapter, a group holds a
//! single expert that sees only the site input.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::{Bottleneck, BottleneckCache, LowRank, LowRankCache};
use crate::error::{Error, Result};
use crate::format;
use crate::layers::Linear;
use crate::moke::{moke_backward, moke_forward_cached, MoKEConfig, MoKEParams, MokeCache, MokeInput, Operators};
use crate::params::{join, NamedTensors};
use crate::tensor::{sigmoid, Init, Scalar, SeedStream, Tensor};
use crate::vit::{
    assign_named, mhsa_backward, mhsa_forward_cached, mlp_backward, mlp_forward_cached, Backbone,
    MhsaCache, MlpCache, ViTConfig,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    #[default]
    Moke,
    Bottleneck,
    Lora,
}

/// Component switches. `gamma` and `margin` only affect the loss.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub petl: bool,
    pub collab: bool,
    pub mrf: bool,
    pub ca: bool,
    pub gamma: bool,
    pub margin: bool,
    pub adapter: AdapterKind,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            petl: true,
            collab: true,
            mrf: true,
            ca: true,
            gamma: true,
            margin: true,
            adapter: AdapterKind::Moke,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub moke: MoKEConfig,
    pub num_aus: usize,
    #[serde(default)]
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(vit: ViTConfig, moke: MoKEConfig, num_aus: usize) -> Self {
        Self {
            vit,
            moke,
            num_aus,
            ablation: Ablation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.moke.validate()?;
        if self.num_aus == 0 {
            return Err(Error::config("num_aus must be >= 1"));
        }
        Ok(())
    }

    /// Experts per group: `N` with collaboration, 1 without, 0 without PETL.
    pub fn experts_per_group(&self) -> usize {
        match (self.ablation.petl, self.chained()) {
            (false, _) => 0,
            (true, true) => self.num_aus,
            (true, false) => 1,
        }
    }

    /// Whether experts inherit knowledge along per-AU chains.
    pub fn chained(&self) -> bool {
        self.ablation.collab && self.ablation.adapter == AdapterKind::Moke
    }

    pub fn operators(&self) -> Operators {
        Operators {
            mrf: self.ablation.mrf,
            ca: self.ablation.ca,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Mhsa,
    Mlp,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::Mhsa => "mhsa",
            Site::Mlp => "mlp",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expert<T> {
    Moke(MoKEParams<T>),
    Bottleneck(Bottleneck<T>),
    LowRank(LowRank<T>),
}

#[derive(Clone, Debug)]
enum ExpertCache<T> {
    Moke(MokeCache<T>),
    Bottleneck(BottleneckCache<T>),
    LowRank(LowRankCache<T>),
}

impl<T: Scalar> Expert<T> {
    fn init(cfg: &ModelConfig, seeds: &mut SeedStream) -> Self {
        let dim = cfg.vit.dim;
        match cfg.ablation.adapter {
            AdapterKind::Moke => Expert::Moke(MoKEParams::init(dim, &cfg.moke, cfg.operators(), seeds)),
            AdapterKind::Bottleneck => Expert::Bottleneck(Bottleneck::init(dim, cfg.moke.d, seeds)),
            AdapterKind::Lora => Expert::LowRank(LowRank::init(dim, cfg.moke.d, seeds)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Expert::Moke(p) => Expert::Moke(p.zeros_like()),
            Expert::Bottleneck(p) => Expert::Bottleneck(p.zeros_like()),
            Expert::LowRank(p) => Expert::LowRank(p.zeros_like()),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, cfg: &MoKEConfig) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x, cfg)?.0)
    }

    fn forward_cached(&self, x: &Tensor<T>, cfg: &MoKEConfig) -> Result<(Tensor<T>, ExpertCache<T>)> {
        Ok(match self {
            Expert::Moke(p) => {
                let (y, c) = moke_forward_cached(x, p, cfg)?;
                (y, ExpertCache::Moke(c))
            }
            Expert::Bottleneck(p) => {
                let (y, c) = p.forward(x, cfg.scale);
                (y, ExpertCache::Bottleneck(c))
            }
            Expert::LowRank(p) => {
                let (y, c) = p.forward(x, cfg.scale);
                (y, ExpertCache::LowRank(c))
            }
        })
    }

    fn backward(
        &self,
        cache: &ExpertCache<T>,
        cfg: &MoKEConfig,
        grad_out: &Tensor<T>,
        grads: &mut Self,
    ) -> Tensor<T> {
        match (self, cache, grads) {
            (Expert::Moke(p), ExpertCache::Moke(c), Expert::Moke(g)) => moke_backward(c, p, cfg, grad_out, g),
            (Expert::Bottleneck(p), ExpertCache::Bottleneck(c), Expert::Bottleneck(g)) => {
                p.backward(c, cfg.scale, grad_out, g)
            }
            (Expert::LowRank(p), ExpertCache::LowRank(c), Expert::LowRank(g)) => {
                p.backward(c, cfg.scale, grad_out, g)
            }
            _ => panic!("expert, cache and gradient kinds differ"),
        }
    }
}

impl<T: Scalar> NamedTensors<T> for Expert<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        match self {
            Expert::Moke(p) => p.visit(prefix, out),
            Expert::Bottleneck(p) => p.visit(prefix, out),
            Expert::LowRank(p) => p.visit(prefix, out),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        match self {
            Expert::Moke(p) => p.visit_mut(prefix, out),
            Expert::Bottleneck(p) => p.visit_mut(prefix, out),
            Expert::LowRank(p) => p.visit_mut(prefix, out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertGroup<T> {
    pub layer: usize,
    pub site: Site,
    pub experts: Vec<Expert<T>>,
}

impl<T: Scalar> ExpertGroup<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            layer: self.layer,
            site: self.site,
            experts: self.experts.iter().map(Expert::zeros_like).collect(),
        }
    }
}

impl<T: Scalar> NamedTensors<T> for ExpertGroup<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&join(prefix, &format!("experts.{i}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("experts.{i}")), out);
        }
    }
}

/// Per-chain knowledge handed from one group to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationState<T> {
    pub knowledge: Vec<Tensor<T>>,
}

impl<T: Scalar> GenerationState<T> {
    pub fn zeros(n: usize, shape: &[usize]) -> Self {
        Self {
            knowledge: (0..n).map(|_| Tensor::zeros(shape)).collect(),
        }
    }
}

/// `K_i = expert_i(x_site + prev_i)`, `K_group = mean_i K_i`, `next_i = K_i`.
pub fn group_forward<T: Scalar>(
    x_site: &Tensor<T>,
    group: &ExpertGroup<T>,
    prev: &GenerationState<T>,
    cfg: &MoKEConfig,
) -> Result<(Tensor<T>, GenerationState<T>)> {
    let (k_group, next, _) = group_forward_cached(x_site, group, prev, cfg)?;
    Ok((k_group, next))
}

fn group_forward_cached<T: Scalar>(
    x_site: &Tensor<T>,
    group: &ExpertGroup<T>,
    prev: &GenerationState<T>,
    cfg: &MoKEConfig,
) -> Result<(Tensor<T>, GenerationState<T>, Vec<ExpertCache<T>>)> {
    let n = group.experts.len();
    if prev.knowledge.len() != n {
        return Err(Error::shape(format!(
            "group has {n} experts but inherited state has {} entries",
            prev.knowledge.len()
        )));
    }
    let mut outs = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    for (e, k_prev) in group.experts.iter().zip(&prev.knowledge) {
        let (k, c) = e.forward_cached(&x_site.add(k_prev), cfg)?;
        outs.push(k);
        caches.push(c);
    }
    let k_group = mean_of(&outs);
    Ok((k_group, GenerationState { knowledge: outs }, caches))
}

/// Index-ascending sum scaled by `1/n`; a single tensor is returned as is.
fn mean_of<T: Scalar>(parts: &[Tensor<T>]) -> Tensor<T> {
    if parts.len() == 1 {
        return parts[0].clone();
    }
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc.add_assign(p);
    }
    acc.scale(T::of(1.0 / parts.len() as f64))
}

/// Everything trained: expert groups and prediction heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Learnable<T> {
    /// `2L` groups ordered block by block, MHSA site first.
    pub groups: Vec<ExpertGroup<T>>,
    /// `D → N` on the final `[CLS]`.
    pub main_head: Linear<T>,
    /// `D → 1` per AU on the `[CLS]` of the last group's expert output.
    pub aux_heads: Vec<Linear<T>>,
}

impl<T: Scalar> Learnable<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut seeds = SeedStream::new(seed);
        let per_group = cfg.experts_per_group();
        let mut groups = Vec::new();
        if per_group > 0 {
            for layer in 0..cfg.vit.depth {
                for site in [Site::Mhsa, Site::Mlp] {
                    groups.push(ExpertGroup {
                        layer,
                        site,
                        experts: (0..per_group).map(|_| Expert::init(cfg, &mut seeds)).collect(),
                    });
                }
            }
        }
        let (d, n) = (cfg.vit.dim, cfg.num_aus);
        let head_init = Init::TruncNormal { std: 0.02 };
        let main_head = Linear::init(n, d, head_init, seeds.next_seed());
        let aux_heads = if per_group > 0 {
            (0..n).map(|_| Linear::init(1, d, head_init, seeds.next_seed())).collect()
        } else {
            Vec::new()
        };
        Self {
            groups,
            main_head,
            aux_heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            groups: self.groups.iter().map(ExpertGroup::zeros_like).collect(),
            main_head: self.main_head.zeros_like(),
            aux_heads: self.aux_heads.iter().map(Linear::zeros_like).collect(),
        }
    }

    /// Elementwise `self += other`, in tensor order.
    pub fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.named_mut("").into_iter().zip(other.named("")) {
            a.add_assign(b);
        }
    }
}

impl<T: Scalar> NamedTensors<T> for Learnable<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for g in &self.groups {
            g.visit(&join(prefix, &format!("groups.{}.{}", g.layer, g.site.name())), out);
        }
        self.main_head.visit(&join(prefix, "main_head"), out);
        for (i, h) in self.aux_heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("aux_heads.{i}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for g in &mut self.groups {
            let p = join(prefix, &format!("groups.{}.{}", g.layer, g.site.name()));
            g.visit_mut(&p, out);
        }
        self.main_head.visit_mut(&join(prefix, "main_head"), out);
        for (i, h) in self.aux_heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("aux_heads.{i}")), out);
        }
    }
}

/// One image's outputs. `aux_*` are absent when PETL is off.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    pub aux_logits: Option<Tensor<T>>,
    pub aux_probs: Option<Tensor<T>>,
}

/// What one group saw and produced, for inspecting the generation chain.
#[derive(Clone, Debug)]
pub struct GroupTrace<T> {
    pub layer: usize,
    pub site: Site,
    pub inherited: Vec<Tensor<T>>,
    pub outputs: Vec<Tensor<T>>,
    pub injected: Tensor<T>,
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    mhsa: MhsaCache<T>,
    mlp: MlpCache<T>,
    experts: [Vec<ExpertCache<T>>; 2],
    traces: [GroupTrace<T>; 2],
}

/// Forward state of one image, consumed by [`AUFormer::backward`].
#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    blocks: Vec<BlockCache<T>>,
    final_cls: Tensor<T>,
    aux_inputs: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelCache<T> {
    pub fn traces(&self) -> Vec<&GroupTrace<T>> {
        self.blocks.iter().flat_map(|b| b.traces.iter()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AUFormer<T> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub learnable: Learnable<T>,
}

fn cls_row<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::new(&[1, x.dim(1)], x.row(0).to_vec()).expect("cls row")
}

impl<T: Scalar> AUFormer<T> {
    /// Fresh model: seeded backbone and learnable set from independent streams.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::init(&config.vit, crate::tensor::Rng::derive(seed, 1).next_u64())?;
        Self::with_backbone(config, backbone, seed)
    }

    pub fn with_backbone(config: ModelConfig, backbone: Backbone<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        if backbone.config != config.vit {
            return Err(Error::config("backbone config differs from model config"));
        }
        let learnable = Learnable::init(&config, crate::tensor::Rng::derive(seed, 2).next_u64());
        Ok(Self {
            config,
            backbone,
            learnable,
        })
    }

    pub fn learnable_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        self.learnable.named("")
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        Ok(self.forward_cached(image)?.0)
    }

    pub fn forward_cached(&self, image: &Tensor<T>) -> Result<(Prediction<T>, ModelCache<T>)> {
        let cfg = &self.config;
        let mut x = self.backbone.patch_embed(image)?;
        let shape = x.shape().to_vec();
        let per_group = cfg.experts_per_group();
        let chained = cfg.chained();
        let mut state = GenerationState::zeros(per_group, &shape);
        let mut blocks = Vec::with_capacity(cfg.vit.depth);
        for (l, block) in self.backbone.blocks.iter().enumerate() {
            let (attn, mhsa) = mhsa_forward_cached(&x, block);
            let mut x_mid = x.add(&attn);
            let mut experts: [Vec<ExpertCache<T>>; 2] = [Vec::new(), Vec::new()];
            let mut traces = Vec::with_capacity(2);
            let (mut mlp_out, mut mlp) = (None, None);
            for (s, site) in [Site::Mhsa, Site::Mlp].into_iter().enumerate() {
                if s == 1 {
                    let (o, c) = mlp_forward_cached(&x_mid, block);
                    mlp_out = Some(o);
                    mlp = Some(c);
                }
                let injected = if per_group > 0 {
                    let x_site = match (cfg.moke.input, s) {
                        (MokeInput::PreNorm, 0) => &x,
                        (MokeInput::PreNorm, _) => &x_mid,
                        (MokeInput::PostNorm, 0) => &mhsa.normed,
                        (MokeInput::PostNorm, _) => &mlp.as_ref().expect("mlp cache").normed,
                    };
                    let inherited = if chained {
                        state
                    } else {
                        GenerationState::zeros(per_group, &shape)
                    };
                    let group = &self.learnable.groups[2 * l + s];
                    let (k_group, next, caches) = group_forward_cached(x_site, group, &inherited, &cfg.moke)?;
                    experts[s] = caches;
                    traces.push(GroupTrace {
                        layer: l,
                        site,
                        inherited: inherited.knowledge,
                        outputs: next.knowledge.clone(),
                        injected: k_group.clone(),
                    });
                    state = next;
                    k_group
                } else {
                    traces.push(GroupTrace {
                        layer: l,
                        site,
                        inherited: Vec::new(),
                        outputs: Vec::new(),
                        injected: Tensor::zeros(&shape),
                    });
                    Tensor::zeros(&shape)
                };
                if s == 0 {
                    if per_group > 0 {
                        x_mid.add_assign(&injected);
                    }
                } else {
                    let mut x_out = x_mid.add(mlp_out.as_ref().expect("mlp output"));
                    if per_group > 0 {
                        x_out.add_assign(&injected);
                    }
                    x = x_out;
                }
            }
            let traces: [GroupTrace<T>; 2] = traces.try_into().expect("two sites");
            blocks.push(BlockCache {
                mhsa,
                mlp: mlp.expect("mlp cache"),
                experts,
                traces,
            });
        }
        let final_cls = cls_row(&x);
        let logits = self.learnable.main_head.forward(&final_cls).reshape(&[cfg.num_aus])?;
        let probs = logits.map(sigmoid);
        let (aux_logits, aux_probs, aux_inputs) = if per_group > 0 {
            let inputs: Vec<Tensor<T>> = (0..cfg.num_aus)
                .map(|i| cls_row(&state.knowledge[i.min(per_group - 1)]))
                .collect();
            let z: Vec<T> = self
                .learnable
                .aux_heads
                .iter()
                .zip(&inputs)
                .map(|(h, c)| h.forward(c).data()[0])
                .collect();
            let z = Tensor::new(&[cfg.num_aus], z)?;
            let p = z.map(sigmoid);
            (Some(z), Some(p), inputs)
        } else {
            (None, None, Vec::new())
        };
        Ok((
            Prediction {
                logits,
                probs,
                aux_logits,
                aux_probs,
            },
            ModelCache {
                blocks,
                final_cls,
                aux_inputs,
            },
        ))
    }

    /// Reverse pass for one image. `grad_logits` and `grad_aux` are loss
    /// gradients with respect to the logits; parameter gradients are
    /// accumulated into `grads`. Backbone tensors receive nothing.
    pub fn backward(
        &self,
        cache: &ModelCache<T>,
        grad_logits: &[T],
        grad_aux: Option<&[T]>,
        grads: &mut Learnable<T>,
    ) {
        let cfg = &self.config;
        let (n, d) = (cfg.num_aus, cfg.vit.dim);
        let per_group = cfg.experts_per_group();
        let gz = Tensor::new(&[1, n], grad_logits.to_vec()).expect("logit grad");
        let learn = &self.learnable;
        learn.main_head.accumulate_grads(&cache.final_cls, &gz, &mut grads.main_head);
        if per_group == 0 {
            return;
        }
        let nt = cfg.vit.num_tokens();
        let mut g_x = Tensor::zeros(&[nt, d]);
        g_x.row_mut(0).copy_from_slice(learn.main_head.backward_input(&gz).data());

        let mut g_chain: Vec<Tensor<T>> = (0..per_group).map(|_| Tensor::zeros(&[nt, d])).collect();
        if let Some(ga) = grad_aux {
            for i in 0..n {
                let g = Tensor::new(&[1, 1], vec![ga[i]]).expect("aux grad");
                learn.aux_heads[i].accumulate_grads(&cache.aux_inputs[i], &g, &mut grads.aux_heads[i]);
                let gc = learn.aux_heads[i].backward_input(&g);
                let row = g_chain[i.min(per_group - 1)].row_mut(0);
                for (r, &v) in row.iter_mut().zip(gc.data()) {
                    *r = *r + v;
                }
            }
        }

        let inv = T::of(1.0 / per_group as f64);
        let chained = cfg.chained();
        for (l, bc) in cache.blocks.iter().enumerate().rev() {
            let block = &self.backbone.blocks[l];
            // MLP site
            for g in &mut g_chain {
                g.axpy(inv, &g_x);
            }
            let mut g_mid = g_x.add(&mlp_backward(block, &bc.mlp, &g_x));
            let mut g_site = Tensor::zeros(&[nt, d]);
            let mut g_prev: Vec<Tensor<T>> = Vec::with_capacity(per_group);
            let (group, ggroup) = (&learn.groups[2 * l + 1], &mut grads.groups[2 * l + 1]);
            for i in 0..per_group {
                let gu = group.experts[i].backward(&bc.experts[1][i], &cfg.moke, &g_chain[i], &mut ggroup.experts[i]);
                g_site.add_assign(&gu);
                g_prev.push(if chained { gu } else { Tensor::zeros(&[nt, d]) });
            }
            match cfg.moke.input {
                MokeInput::PreNorm => g_mid.add_assign(&g_site),
                MokeInput::PostNorm => g_mid.add_assign(&block.ln2.backward(&bc.mlp.ln, &g_site)),
            }
            g_chain = g_prev;

            // MHSA site
            for g in &mut g_chain {
                g.axpy(inv, &g_mid);
            }
            g_x = g_mid.add(&mhsa_backward(block, &bc.mhsa, &g_mid));
            let mut g_site = Tensor::zeros(&[nt, d]);
            let mut g_prev: Vec<Tensor<T>> = Vec::with_capacity(per_group);
            let (group, ggroup) = (&learn.groups[2 * l], &mut grads.groups[2 * l]);
            for i in 0..per_group {
                let gu = group.experts[i].backward(&bc.experts[0][i], &cfg.moke, &g_chain[i], &mut ggroup.experts[i]);
                g_site.add_assign(&gu);
                g_prev.push(if chained { gu } else { Tensor::zeros(&[nt, d]) });
            }
            match cfg.moke.input {
                MokeInput::PreNorm => g_x.add_assign(&g_site),
                MokeInput::PostNorm => g_x.add_assign(&block.ln1.backward(&bc.mhsa.ln, &g_site)),
            }
            g_chain = g_prev;
        }
    }

    /// Weights go to `path` (backbone then learnable tensors); the model
    /// config goes to a `.json` sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.backbone.named("backbone");
        tensors.extend(self.learnable.named(""));
        format::save_tensors(path, &tensors)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        config.validate()?;
        let mut model = Self {
            backbone: Backbone::zeroed(&config.vit)?,
            learnable: Learnable::init(&config, 0),
            config,
        };
        let tensors = format::load_tensors::<T>(path)?;
        let mut slots = model.backbone.named_mut("backbone");
        slots.extend(model.learnable.named_mut(""));
        let mut holder = Slots(slots);
        assign_named(&mut holder, "", tensors)?;
        Ok(model)
    }
}

/// Adapter so a flat slot list can be filled by [`assign_named`].
struct Slots<'a, T>(Vec<(String, &'a mut Tensor<T>)>);

impl<T: Scalar> NamedTensors<T> for Slots<'_, T> {
    fn visit<'b>(&'b self, _prefix: &str, out: &mut Vec<(String, &'b Tensor<T>)>) {
        out.extend(self.0.iter().map(|(n, t)| (n.clone(), &**t)));
    }

    fn visit_mut<'b>(&'b mut self, _prefix: &str, out: &mut Vec<(String, &'b mut Tensor<T>)>) {
        out.extend(self.0.iter_mut().map(|(n, t)| (n.clone(), &mut **t)));
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}
