//! One mixture-of-knowledge expert.
//!
//! Tokens are reshaped to a patch grid (the `[CLS]` token becomes its own
//! 1×1 map), reduced to `d` channels by a 1×1 convolution, passed through a
//! 3×3 convolution and GELU to give the basic features `M''`, then enriched
//! by the multi-receptive-field (MRF) and context-aware (CA) operators. The
//! three are summed and expanded back to `D` channels by a zero-initialized
//! 1×1 convolution, so a fresh expert outputs exactly zero.
//!
//! Maps are stored channel-first, `[C, H, W]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{join, NamedTensors};
use crate::tensor::{
    chw_to_hwc, conv2d, conv2d_backward, gelu, gelu_grad, grid_to_tokens, hwc_to_chw,
    seeded_init, tokens_to_grid, Conv2dParams, Init, Scalar, SeedStream, Tensor,
};

/// Which tensor the experts at a site read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MokeInput {
    /// The raw residual stream entering the sublayer.
    #[default]
    PreNorm,
    /// The sublayer's LayerNorm output.
    PostNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoKEConfig {
    /// Reduced channel count.
    pub d: usize,
    /// Dilation rates of the MRF branches, strictly increasing.
    pub dilations: Vec<usize>,
    /// CA neighborhood side `S` (odd).
    pub neighborhood: usize,
    /// Output scale `s`.
    pub scale: f64,
    pub input: MokeInput,
}

impl Default for MoKEConfig {
    fn default() -> Self {
        Self {
            d: 4,
            dilations: vec![1, 3, 5],
            neighborhood: 3,
            scale: 1.0,
            input: MokeInput::PreNorm,
        }
    }
}

impl MoKEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("MoKE reduced channels d must be >= 1"));
        }
        if self.dilations.is_empty()
            || self.dilations[0] == 0
            || self.dilations.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::config(format!(
                "dilations must be strictly increasing positive integers, got {:?}",
                self.dilations
            )));
        }
        if self.neighborhood < 3 || self.neighborhood % 2 == 0 {
            return Err(Error::config(format!(
                "neighborhood S must be odd and >= 3, got {}",
                self.neighborhood
            )));
        }
        if !self.scale.is_finite() {
            return Err(Error::config("MoKE scale must be finite"));
        }
        Ok(())
    }
}

/// Which knowledge operators an expert carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Operators {
    pub mrf: bool,
    pub ca: bool,
}

impl Default for Operators {
    fn default() -> Self {
        Self { mrf: true, ca: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MrfParams<T> {
    pub branches: Vec<Conv2dParams<T>>,
    /// `[d, k·d, 1, 1]` fusion of the concatenated branches.
    pub fuse: Conv2dParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaParams<T> {
    pub q: Conv2dParams<T>,
    pub k: Conv2dParams<T>,
    pub v: Conv2dParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoKEParams<T> {
    pub down: Conv2dParams<T>,
    pub basic: Conv2dParams<T>,
    pub mrf: Option<MrfParams<T>>,
    pub ca: Option<CaParams<T>>,
    pub up: Conv2dParams<T>,
}

const INIT_STD: f64 = 0.02;

fn conv_init<T: Scalar>(
    c_out: usize,
    c_in: usize,
    k: usize,
    dilation: usize,
    seeds: &mut SeedStream,
) -> Conv2dParams<T> {
    Conv2dParams::new(
        seeded_init(&[c_out, c_in, k, k], Init::TruncNormal { std: INIT_STD }, seeds.next_seed()),
        Tensor::zeros(&[c_out]),
        dilation,
    )
    .expect("valid conv geometry")
}

impl<T: Scalar> MoKEParams<T> {
    /// Fresh expert: truncated-normal weights, zero biases, zero up-projection.
    pub fn init(dim: usize, cfg: &MoKEConfig, ops: Operators, seeds: &mut SeedStream) -> Self {
        let d = cfg.d;
        let down = conv_init(d, dim, 1, 1, seeds);
        let basic = conv_init(d, d, 3, 1, seeds);
        let mrf = ops.mrf.then(|| MrfParams {
            branches: cfg
                .dilations
                .iter()
                .map(|&r| conv_init(d, d, 3, r, seeds))
                .collect(),
            fuse: conv_init(d, d * cfg.dilations.len(), 1, 1, seeds),
        });
        let ca = ops.ca.then(|| CaParams {
            q: conv_init(d, d, 1, 1, seeds),
            k: conv_init(d, d, 1, 1, seeds),
            v: conv_init(d, d, 1, 1, seeds),
        });
        Self {
            down,
            basic,
            mrf,
            ca,
            up: Conv2dParams::zeros(dim, d, 1, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            down: self.down.zeros_like(),
            basic: self.basic.zeros_like(),
            mrf: self.mrf.as_ref().map(|m| MrfParams {
                branches: m.branches.iter().map(Conv2dParams::zeros_like).collect(),
                fuse: m.fuse.zeros_like(),
            }),
            ca: self.ca.as_ref().map(|c| CaParams {
                q: c.q.zeros_like(),
                k: c.k.zeros_like(),
                v: c.v.zeros_like(),
            }),
            up: self.up.zeros_like(),
        }
    }

    pub fn reduced(&self) -> usize {
        self.down.c_out()
    }
}

impl<T: Scalar> NamedTensors<T> for MoKEParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.down.visit(&join(prefix, "down"), out);
        self.basic.visit(&join(prefix, "basic"), out);
        if let Some(m) = &self.mrf {
            for (i, b) in m.branches.iter().enumerate() {
                b.visit(&join(prefix, &format!("mrf.branch{i}")), out);
            }
            m.fuse.visit(&join(prefix, "mrf.fuse"), out);
        }
        if let Some(c) = &self.ca {
            c.q.visit(&join(prefix, "ca.q"), out);
            c.k.visit(&join(prefix, "ca.k"), out);
            c.v.visit(&join(prefix, "ca.v"), out);
        }
        self.up.visit(&join(prefix, "up"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.down.visit_mut(&join(prefix, "down"), out);
        self.basic.visit_mut(&join(prefix, "basic"), out);
        if let Some(m) = &mut self.mrf {
            for (i, b) in m.branches.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("mrf.branch{i}")), out);
            }
            m.fuse.visit_mut(&join(prefix, "mrf.fuse"), out);
        }
        if let Some(c) = &mut self.ca {
            c.q.visit_mut(&join(prefix, "ca.q"), out);
            c.k.visit_mut(&join(prefix, "ca.k"), out);
            c.v.visit_mut(&join(prefix, "ca.v"), out);
        }
        self.up.visit_mut(&join(prefix, "up"), out);
    }
}

// ---------------------------------------------------------------------------
// MRF operator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MrfCache<T> {
    concat: Tensor<T>,
}

fn concat_channels<T: Scalar>(parts: &[Tensor<T>]) -> Tensor<T> {
    let (h, w) = (parts[0].dim(1), parts[0].dim(2));
    let c: usize = parts.iter().map(|p| p.dim(0)).sum();
    let mut data = Vec::with_capacity(c * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[c, h, w], data).expect("concat shape")
}

/// Parallel dilated 3×3 convolutions, concatenated along channels and fused
/// back to `d` channels by a 1×1 convolution. Spatial size is preserved.
pub fn mrf_forward<T: Scalar>(m: &Tensor<T>, params: &MrfParams<T>) -> Result<Tensor<T>> {
    Ok(mrf_forward_cached(m, params)?.0)
}

fn mrf_forward_cached<T: Scalar>(
    m: &Tensor<T>,
    params: &MrfParams<T>,
) -> Result<(Tensor<T>, MrfCache<T>)> {
    let outs = params
        .branches
        .iter()
        .map(|b| conv2d(m, b))
        .collect::<Result<Vec<_>>>()?;
    let concat = concat_channels(&outs);
    let fused = conv2d(&concat, &params.fuse)?;
    Ok((fused, MrfCache { concat }))
}

fn mrf_backward<T: Scalar>(
    m: &Tensor<T>,
    params: &MrfParams<T>,
    cache: &MrfCache<T>,
    grad_out: &Tensor<T>,
    grads: &mut MrfParams<T>,
) -> Tensor<T> {
    let g_concat = conv2d_backward(&cache.concat, &params.fuse, grad_out, &mut grads.fuse);
    let d = m.dim(0);
    let plane = d * m.dim(1) * m.dim(2);
    let mut gm = Tensor::zeros(m.shape());
    for (i, (b, gb)) in params.branches.iter().zip(&mut grads.branches).enumerate() {
        let gi = Tensor::new(m.shape(), g_concat.data()[i * plane..(i + 1) * plane].to_vec())
            .expect("branch slice");
        gm.add_assign(&conv2d_backward(m, b, &gi, gb));
    }
    gm
}

// ---------------------------------------------------------------------------
// CA operator
// ---------------------------------------------------------------------------

/// Per-channel neighborhood attention weights.
///
/// For channel `c` and position `x` the logits over in-bounds neighbors
/// `x' ∈ R(x)` are `Q_x[c]·K_{x'}[c] / √d`; out-of-bounds neighbors are
/// excluded from the softmax rather than zero-padded. `weights` has layout
/// `[C, H, W, S·S]` with exact zeros in excluded slots.
#[derive(Clone, Debug)]
pub struct CaCache<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub weights: Vec<T>,
    pub neighborhood: usize,
}

/// Visit every in-bounds neighbor slot of `(y, x)`: `(slot, ny, nx)`.
fn neighbors(
    y: usize,
    x: usize,
    h: usize,
    w: usize,
    s: usize,
) -> impl Iterator<Item = (usize, usize, usize)> {
    let r = (s / 2) as isize;
    (0..s * s).filter_map(move |slot| {
        let ny = y as isize + (slot / s) as isize - r;
        let nx = x as isize + (slot % s) as isize - r;
        (ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize)
            .then_some((slot, ny as usize, nx as usize))
    })
}

pub fn ca_forward<T: Scalar>(
    m: &Tensor<T>,
    params: &CaParams<T>,
    neighborhood: usize,
) -> Result<Tensor<T>> {
    Ok(ca_forward_cached(m, params, neighborhood)?.0)
}

pub fn ca_forward_cached<T: Scalar>(
    m: &Tensor<T>,
    params: &CaParams<T>,
    neighborhood: usize,
) -> Result<(Tensor<T>, CaCache<T>)> {
    let q = conv2d(m, &params.q)?;
    let k = conv2d(m, &params.k)?;
    let v = conv2d(m, &params.v)?;
    let (c_n, h, w) = (q.dim(0), q.dim(1), q.dim(2));
    let s2 = neighborhood * neighborhood;
    let scale = T::of(1.0 / (c_n as f64).sqrt());
    let mut weights = vec![T::zero(); c_n * h * w * s2];
    let mut out = vec![T::zero(); c_n * h * w];
    let mut logits = vec![T::zero(); s2];
    for c in 0..c_n {
        let (qc, kc, vc) = (
            &q.data()[c * h * w..(c + 1) * h * w],
            &k.data()[c * h * w..(c + 1) * h * w],
            &v.data()[c * h * w..(c + 1) * h * w],
        );
        for y in 0..h {
            for x in 0..w {
                let pos = y * w + x;
                let mut max = T::neg_infinity();
                for (slot, ny, nx) in neighbors(y, x, h, w, neighborhood) {
                    let l = qc[pos] * kc[ny * w + nx] * scale;
                    logits[slot] = l;
                    max = max.max(l);
                }
                let wslot = &mut weights[(c * h * w + pos) * s2..(c * h * w + pos + 1) * s2];
                let mut total = T::zero();
                for (slot, _, _) in neighbors(y, x, h, w, neighborhood) {
                    let e = (logits[slot] - max).exp();
                    wslot[slot] = e;
                    total = total + e;
                }
                let mut acc = T::zero();
                for (slot, ny, nx) in neighbors(y, x, h, w, neighborhood) {
                    wslot[slot] = wslot[slot] / total;
                    acc = acc + wslot[slot] * vc[ny * w + nx];
                }
                out[c * h * w + pos] = acc;
            }
        }
    }
    let out = Tensor::new(&[c_n, h, w], out)?;
    Ok((
        out,
        CaCache {
            q,
            k,
            v,
            weights,
            neighborhood,
        },
    ))
}

fn ca_backward<T: Scalar>(
    m: &Tensor<T>,
    params: &CaParams<T>,
    cache: &CaCache<T>,
    grad_out: &Tensor<T>,
    grads: &mut CaParams<T>,
) -> Tensor<T> {
    let (c_n, h, w) = (cache.q.dim(0), cache.q.dim(1), cache.q.dim(2));
    let s = cache.neighborhood;
    let s2 = s * s;
    let scale = T::of(1.0 / (c_n as f64).sqrt());
    let mut gq = Tensor::zeros(cache.q.shape());
    let mut gk = Tensor::zeros(cache.k.shape());
    let mut gv = Tensor::zeros(cache.v.shape());
    let mut gw = vec![T::zero(); s2];
    for c in 0..c_n {
        let off = c * h * w;
        for y in 0..h {
            for x in 0..w {
                let pos = y * w + x;
                let g = grad_out.data()[off + pos];
                let wslot = &cache.weights[(off + pos) * s2..(off + pos + 1) * s2];
                let mut dot = T::zero();
                for (slot, ny, nx) in neighbors(y, x, h, w, s) {
                    let np = off + ny * w + nx;
                    gw[slot] = g * cache.v.data()[np];
                    dot = dot + gw[slot] * wslot[slot];
                    let gvv = &mut gv.data_mut()[np];
                    *gvv = *gvv + wslot[slot] * g;
                }
                let qx = cache.q.data()[off + pos];
                let mut gqx = T::zero();
                for (slot, ny, nx) in neighbors(y, x, h, w, s) {
                    let np = off + ny * w + nx;
                    let gl = wslot[slot] * (gw[slot] - dot) * scale;
                    gqx = gqx + gl * cache.k.data()[np];
                    let gkk = &mut gk.data_mut()[np];
                    *gkk = *gkk + gl * qx;
                }
                let gqq = &mut gq.data_mut()[off + pos];
                *gqq = *gqq + gqx;
            }
        }
    }
    let mut gm = conv2d_backward(m, &params.q, &gq, &mut grads.q);
    gm.add_assign(&conv2d_backward(m, &params.k, &gk, &mut grads.k));
    gm.add_assign(&conv2d_backward(m, &params.v, &gv, &mut grads.v));
    gm
}

// ---------------------------------------------------------------------------
// Full expert
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct MapCache<T> {
    input: Tensor<T>,
    reduced: Tensor<T>,
    pre_act: Tensor<T>,
    basic: Tensor<T>,
    mrf: Option<MrfCache<T>>,
    ca: Option<CaCache<T>>,
    fused: Tensor<T>,
}

/// Cached forward state of one expert call, for [`moke_backward`].
#[derive(Clone, Debug)]
pub struct MokeCache<T> {
    cls: MapCache<T>,
    grid: MapCache<T>,
}

fn map_forward<T: Scalar>(
    input: Tensor<T>,
    params: &MoKEParams<T>,
    cfg: &MoKEConfig,
) -> Result<(Tensor<T>, MapCache<T>)> {
    let reduced = conv2d(&input, &params.down)?;
    let pre_act = conv2d(&reduced, &params.basic)?;
    let basic = pre_act.map(gelu);
    let mut fused = basic.clone();
    let mrf = match &params.mrf {
        Some(p) => {
            let (k_mrf, cache) = mrf_forward_cached(&basic, p)?;
            fused.add_assign(&k_mrf);
            Some(cache)
        }
        None => None,
    };
    let ca = match &params.ca {
        Some(p) => {
            let (k_ca, cache) = ca_forward_cached(&basic, p, cfg.neighborhood)?;
            fused.add_assign(&k_ca);
            Some(cache)
        }
        None => None,
    };
    let out = conv2d(&fused, &params.up)?.scale(T::of(cfg.scale));
    Ok((
        out,
        MapCache {
            input,
            reduced,
            pre_act,
            basic,
            mrf,
            ca,
            fused,
        },
    ))
}

fn map_backward<T: Scalar>(
    cache: &MapCache<T>,
    params: &MoKEParams<T>,
    cfg: &MoKEConfig,
    grad_out: &Tensor<T>,
    grads: &mut MoKEParams<T>,
) -> Tensor<T> {
    let g_up = grad_out.scale(T::of(cfg.scale));
    let g_fused = conv2d_backward(&cache.fused, &params.up, &g_up, &mut grads.up);
    let mut g_basic = g_fused.clone();
    if let (Some(p), Some(c), Some(g)) = (&params.mrf, &cache.mrf, grads.mrf.as_mut()) {
        g_basic.add_assign(&mrf_backward(&cache.basic, p, c, &g_fused, g));
    }
    if let (Some(p), Some(c), Some(g)) = (&params.ca, &cache.ca, grads.ca.as_mut()) {
        g_basic.add_assign(&ca_backward(&cache.basic, p, c, &g_fused, g));
    }
    for (g, &a) in g_basic.data_mut().iter_mut().zip(cache.pre_act.data()) {
        *g = *g * gelu_grad(a);
    }
    let g_reduced = conv2d_backward(&cache.reduced, &params.basic, &g_basic, &mut grads.basic);
    conv2d_backward(&cache.input, &params.down, &g_reduced, &mut grads.down)
}

/// `[N_t, D]` tokens → `[N_t, D]` knowledge.
pub fn moke_forward<T: Scalar>(
    tokens: &Tensor<T>,
    params: &MoKEParams<T>,
    cfg: &MoKEConfig,
) -> Result<Tensor<T>> {
    Ok(moke_forward_cached(tokens, params, cfg)?.0)
}

pub fn moke_forward_cached<T: Scalar>(
    tokens: &Tensor<T>,
    params: &MoKEParams<T>,
    cfg: &MoKEConfig,
) -> Result<(Tensor<T>, MokeCache<T>)> {
    let dim = tokens.dim(1);
    if params.down.c_in() != dim {
        return Err(Error::shape(format!(
            "expert expects {} channels, tokens have {dim}",
            params.down.c_in()
        )));
    }
    let (cls, grid) = tokens_to_grid(tokens)?;
    // a [1, 1, D] token is already laid out as a [D, 1, 1] map
    let cls_map = cls.reshape(&[dim, 1, 1])?;
    let (cls_out, cls_cache) = map_forward(cls_map, params, cfg)?;
    let (grid_out, grid_cache) = map_forward(hwc_to_chw(&grid), params, cfg)?;
    let out = grid_to_tokens(&cls_out.reshape(&[1, 1, dim])?, &chw_to_hwc(&grid_out))?;
    Ok((
        out,
        MokeCache {
            cls: cls_cache,
            grid: grid_cache,
        },
    ))
}

/// Accumulates parameter gradients into `grads`; returns the token gradient.
pub fn moke_backward<T: Scalar>(
    cache: &MokeCache<T>,
    params: &MoKEParams<T>,
    cfg: &MoKEConfig,
    grad_out: &Tensor<T>,
    grads: &mut MoKEParams<T>,
) -> Tensor<T> {
    let dim = grad_out.dim(1);
    let (g_cls, g_grid) = tokens_to_grid(grad_out).expect("token grid");
    let g_cls = g_cls.reshape(&[dim, 1, 1]).expect("cls map");
    let gi_cls = map_backward(&cache.cls, params, cfg, &g_cls, grads);
    let gi_grid = map_backward(&cache.grid, params, cfg, &hwc_to_chw(&g_grid), grads);
    grid_to_tokens(
        &gi_cls.reshape(&[1, 1, dim]).expect("cls token"),
        &chw_to_hwc(&gi_grid),
    )
    .expect("token layout")
}
