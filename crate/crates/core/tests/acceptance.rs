//! Acceptance criteria. Runs as a plain binary so every criterion prints
//! one PASS/FAIL line in `cargo test` output; exits nonzero on any FAIL.

use std::io::Cursor;
use std::time::{Duration, Instant};

use auformer::collab::{group_forward, AUFormer, Expert, ExpertGroup, GenerationState, ModelConfig, Site};
use auformer::config::{run_training, RunConfig};
use auformer::datagen::{generate_records, read_sample, write_sample, Dataset, SampleRecord, SyntheticSpec};
use auformer::format::{read_tensors, write_tensors};
use auformer::losses::{
    gradcheck, mdwa_loss, negative_branch_grad, reference_losses, total_loss, CheckedLoss, LossConfig, LossSettings,
};
use auformer::moke::{ca_forward, moke_forward, CaParams, MoKEConfig, MoKEParams, Operators};
use auformer::params::NamedTensors;
use auformer::tensor::{conv2d, seeded_init, Conv2dParams, Init, Rng, SeedStream, Tensor};
use auformer::trainer::{count_params, train, TrainConfig};
use auformer::vit::{mhsa_forward, Backbone, ViTConfig};
use auformer::Error;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn desk() -> ModelConfig {
    ModelConfig::new(ViTConfig::default(), MoKEConfig::default(), 4)
}

fn small_vit() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        dim: 32,
        depth: 2,
        heads: 2,
        ..ViTConfig::default()
    }
}

fn small_spec(samples: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        image_size: 16,
        samples,
        pattern_scales: vec![0.75, 1.25, 2.0, 3.0],
        seed,
        ..SyntheticSpec::default()
    }
}

fn randomize<M: NamedTensors<f64>>(m: &mut M, seed: u64, std: f64) {
    let mut seeds = SeedStream::new(seed);
    for (_, t) in m.named_mut("") {
        *t = seeded_init(t.shape(), Init::TruncNormal { std }, seeds.next_seed());
    }
}

fn rel(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn timed(limit: Duration, start: Instant) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

// 1 ------------------------------------------------------------------------

fn identity_at_init() -> Outcome {
    let start = Instant::now();
    let model = AUFormer::<f32>::init(desk(), 7).unwrap();
    let mut mismatches = 0;
    for i in 0..100u64 {
        let img: Tensor<f32> = seeded_init(&[1, 32, 32], Init::TruncNormal { std: 1.0 }, 1000 + i);
        let pred = model.forward(&img).unwrap();
        let x = model.backbone.forward(&img).unwrap();
        let cls = Tensor::new(&[1, x.dim(1)], x.row(0).to_vec()).unwrap();
        let z = model.learnable.main_head.forward(&cls);
        if !pred.logits.data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            mismatches += 1;
        }
    }
    let (fast, t) = timed(Duration::from_secs(10), start);
    outcome(mismatches == 0 && fast, format!("100 images, {mismatches} bit mismatches, {t}"))
}

// 2 ------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let losses = [CheckedLoss::Mdwa, CheckedLoss::Wdi, CheckedLoss::Total];
    let report = gradcheck(&losses, 1000, 2024, false).unwrap();
    let worst = report.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    let mdwa: Vec<_> = report.iter().filter(|e| e.loss == CheckedLoss::Mdwa).collect();
    let truncated = mdwa.iter().filter(|e| e.point.y < 0.5 && e.point.p < e.point.margin).count();
    let active_neg = mdwa.iter().filter(|e| e.point.y < 0.5 && e.point.p > e.point.margin).count();
    let positives = mdwa.iter().filter(|e| e.point.y > 0.5).count();
    let flipped = gradcheck(&losses, 50, 2024, true).unwrap();
    let control = flipped.iter().any(|e| e.rel_err > 1e-5);
    let loss_ok = worst < 1e-6 && report.len() == 3000 && truncated > 0 && active_neg > 0 && positives > 0 && control;

    // end-to-end parameter gradients of the desk model through the total loss
    let cfg = desk();
    let mut model = AUFormer::<f64>::init(cfg.clone(), 11).unwrap();
    randomize(&mut model.learnable, 12, 0.05);
    let img: Tensor<f64> = seeded_init(&[1, 32, 32], Init::TruncNormal { std: 1.0 }, 13);
    let y = Tensor::<f64>::from_f64(&[1, 4], &[1.0, 0.0, 1.0, 0.0]).unwrap();
    let loss_cfg = LossConfig::from_rates(&[0.2, 0.3, 0.4, 0.5], &LossSettings { margin: 0.05, ..LossSettings::default() }, true, true).unwrap();
    let objective = |m: &AUFormer<f64>| -> f64 {
        let p = m.forward(&img).unwrap();
        let pr = p.probs.reshape(&[1, 4]).unwrap();
        let aux = p.aux_probs.map(|a| a.reshape(&[1, 4]).unwrap());
        total_loss(&pr, aux.as_ref(), &y, &loss_cfg).unwrap().value
    };
    let (pred, cache) = model.forward_cached(&img).unwrap();
    let pr = pred.probs.clone().reshape(&[1, 4]).unwrap();
    let aux = pred.aux_probs.clone().map(|a| a.reshape(&[1, 4]).unwrap());
    let tl = total_loss(&pr, aux.as_ref(), &y, &loss_cfg).unwrap();
    let mut grads = model.learnable.zeros_like();
    model.backward(&cache, tl.grad.row(0), tl.aux_grad.as_ref().map(|g| g.row(0)), &mut grads);
    let analytic: Vec<Vec<f64>> = grads.named("").into_iter().map(|(_, t)| t.data().to_vec()).collect();
    let mut rng = Rng::new(14);
    let h = 1e-6;
    let mut worst_param: f64 = 0.0;
    for _ in 0..20 {
        let ti = rng.below(analytic.len());
        let i = rng.below(analytic[ti].len());
        let bump = |d: f64| {
            let mut m = model.clone();
            m.learnable.named_mut("")[ti].1.data_mut()[i] += d;
            objective(&m)
        };
        let num = (bump(h) - bump(-h)) / (2.0 * h);
        worst_param = worst_param.max(rel(analytic[ti][i], num, 1e-6));
    }
    let (fast, t) = timed(Duration::from_secs(120), start);
    outcome(
        loss_ok && worst_param < 1e-3 && fast,
        format!(
            "loss points 3x1000 worst rel {worst:.2e} (truncated {truncated}, active negatives {active_neg}, positives {positives}, wrong-sign control caught: {control}); 20 desk-model params worst rel {worst_param:.2e}; {t}"
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn closed_form_gradient() -> Outcome {
    let g = negative_branch_grad(0.5, 1.0, 0.1, 1.0);
    let worked = (g * 1e4).round() / 1e4 == 0.2944;
    let below = [0.0, 1e-3, 0.05, 0.0999].iter().all(|&p| negative_branch_grad(p, 1.5, 0.1, 2.0) == 0.0);
    let cfg = LossConfig::from_rates(&[0.3], &LossSettings::default(), true, true).unwrap();
    let p = Tensor::<f64>::from_f64(&[3, 1], &[0.01, 0.05, 0.09]).unwrap();
    let y = Tensor::<f64>::zeros(&[3, 1]);
    let out = mdwa_loss(&p, &y, &cfg).unwrap();
    let batch_zero = out.value == 0.0 && out.grad.data().iter().all(|&v| v == 0.0);
    outcome(worked && below && batch_zero, format!("grad(p=0.5, m=0.1, γ=1, ω=1) = {g:.6}; p < m gives exactly 0: {}", below && batch_zero))
}

// 4 ------------------------------------------------------------------------

fn loss_reductions() -> Outcome {
    let n = 4;
    let weights = [0.7, 1.3, 0.5, 1.5];
    let mut rng = Rng::new(40);
    let b = 200;
    let pv: Vec<f64> = (0..b * n).map(|_| rng.uniform_range(0.001, 0.999)).collect();
    let yv: Vec<f64> = (0..b * n).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect();
    let p = Tensor::<f64>::from_f64(&[b, n], &pv).unwrap();
    let y = Tensor::<f64>::from_f64(&[b, n], &yv).unwrap();
    let cfg = |gammas: Vec<f64>, margin: f64| LossConfig {
        rates: vec![0.5; n],
        weights: weights.to_vec(),
        gammas,
        margin,
        b_left: 1.0,
        b_right: 2.0,
        eps: 1.0,
    };
    // independent per-element oracles
    let wa_term = |w: f64, k: f64, p: f64, y: f64| if y > 0.5 { -w * p.ln() } else { -w * p.powf(k) * (1.0 - p).ln() };
    let mwa_term = |w: f64, m: f64, p: f64, y: f64| {
        let pm = (p - m).max(0.0);
        if y > 0.5 {
            -w * p.ln()
        } else if pm == 0.0 {
            0.0
        } else {
            -w * pm * (1.0 - pm).ln()
        }
    };
    let mut worst: f64 = 0.0;
    let refs = reference_losses(&p, &y, &weights, 2.0, 0.1).unwrap();
    for s in 0..b {
        for i in 0..n {
            let (pe, ye) = (p.row(s)[i], y.row(s)[i]);
            let one_p = Tensor::<f64>::from_f64(&[1, 1], &[pe]).unwrap();
            let one_y = Tensor::<f64>::from_f64(&[1, 1], &[ye]).unwrap();
            let single = |gamma: f64, m: f64| {
                let c = LossConfig { weights: vec![weights[i]], rates: vec![0.5], gammas: vec![gamma], ..cfg(vec![], m) };
                mdwa_loss(&one_p, &one_y, &c).unwrap().value
            };
            worst = worst.max((single(2.0, 0.0) - wa_term(weights[i], 2.0, pe, ye)).abs());
            worst = worst.max((single(1.0, 0.1) - mwa_term(weights[i], 0.1, pe, ye)).abs());
        }
    }
    // batch-level agreement with the reference implementations
    let wa = mdwa_loss(&p, &y, &cfg(vec![2.0; n], 0.0)).unwrap();
    let mwa = mdwa_loss(&p, &y, &cfg(vec![1.0; n], 0.1)).unwrap();
    worst = worst
        .max((wa.value - refs.wa.value).abs())
        .max(wa.grad.max_abs_diff(&refs.wa.grad))
        .max((mwa.value - refs.mwa.value).abs())
        .max(mwa.grad.max_abs_diff(&refs.mwa.grad));

    // difficulty ordering across AUs: rarer AU (smaller γ, larger ω) gets the
    // larger negative-branch gradient at every p above the margin
    let rates = [0.2, 0.3, 0.4, 0.5];
    let lc = LossConfig::from_rates(&rates, &LossSettings::default(), true, true).unwrap();
    let mut violations = 0;
    let mut pure_violations = 0;
    for k in 1..=100 {
        let p = lc.margin + (1.0 - lc.margin) * k as f64 / 101.0;
        let g: Vec<f64> = (0..n).map(|i| negative_branch_grad(p, lc.gammas[i], lc.margin, lc.weights[i])).collect();
        violations += g.windows(2).filter(|w| w[0] < w[1]).count();
        // exponent alone, where the ordering holds for any γ in [1, 2] (p_m up to 0.7)
        if p - lc.margin <= 0.7 {
            let gu: Vec<f64> = (0..n).map(|i| negative_branch_grad(p, lc.gammas[i], lc.margin, 1.0)).collect();
            pure_violations += gu.windows(2).filter(|w| w[0] < w[1]).count();
        }
    }
    outcome(
        worst < 1e-12 && violations == 0 && pure_violations == 0,
        format!(
            "WA/MWA reductions max diff {worst:.1e}; per-AU ordering violations {violations}/300 on 100 points (γ = {:?}); exponent-only violations for p_m <= 0.7: {pure_violations}",
            lc.gammas.iter().map(|g| (g * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

// 5 ------------------------------------------------------------------------

fn conv_oracle(x: &Tensor<f64>, p: &Conv2dParams<f64>) -> Tensor<f64> {
    let (ci, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let (co, k) = (p.weight.dim(0), p.weight.dim(2));
    let (dil, pad) = (p.dilation as isize, p.padding as isize);
    let mut out = Tensor::zeros(&[co, h, w]);
    for o in 0..co {
        for yy in 0..h {
            for xx in 0..w {
                let mut acc = p.bias.data()[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = yy as isize - pad + ky as isize * dil;
                            let sx = xx as isize - pad + kx as isize * dil;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += p.weight.data()[((o * ci + c) * k + ky) * k + kx]
                                    * x.data()[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
                out.data_mut()[(o * h + yy) * w + xx] = acc;
            }
        }
    }
    out
}

fn linear(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (o, i) = (w.dim(0), w.dim(1));
    (0..o).map(|r| b.data()[r] + (0..i).map(|c| w.data()[r * i + c] * x[c]).sum::<f64>()).collect()
}

fn oracle_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(50);
    // conv2d
    for trial in 0..12u64 {
        let size = 4 + rng.below(5);
        let k = if trial % 4 == 0 { 1 } else { 3 };
        let dil = if k == 1 { 1 } else { 1 + rng.below(3) };
        let x: Tensor<f64> = seeded_init(&[2, size, size], Init::TruncNormal { std: 1.0 }, 500 + trial);
        let p = Conv2dParams::new(
            seeded_init(&[3, 2, k, k], Init::TruncNormal { std: 1.0 }, 600 + trial),
            seeded_init(&[3], Init::TruncNormal { std: 1.0 }, 700 + trial),
            dil,
        )
        .unwrap();
        worst = worst.max(conv2d(&x, &p).unwrap().max_abs_diff(&conv_oracle(&x, &p)));
    }
    let conv_worst = worst;

    // MHSA on 3 tokens, 2 heads
    let vit = ViTConfig { image_size: 4, patch_size: 2, dim: 4, depth: 1, heads: 2, mlp_ratio: 2.0, in_chans: 1 };
    let mut bb = Backbone::<f64>::init(&vit, 51).unwrap();
    randomize(&mut bb, 52, 0.7);
    let block = &bb.blocks[0];
    let x: Tensor<f64> = seeded_init(&[3, 4], Init::TruncNormal { std: 1.0 }, 53);
    let mut oracle = Tensor::zeros(&[3, 4]);
    let normed: Vec<Vec<f64>> = (0..3)
        .map(|t| {
            let r = x.row(t);
            let mean = r.iter().sum::<f64>() / 4.0;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            (0..4).map(|j| (r[j] - mean) / (var + 1e-6).sqrt() * block.ln1.weight.data()[j] + block.ln1.bias.data()[j]).collect()
        })
        .collect();
    let q: Vec<Vec<f64>> = normed.iter().map(|r| linear(r, &block.wq.weight, &block.wq.bias)).collect();
    let kk: Vec<Vec<f64>> = normed.iter().map(|r| linear(r, &block.wk.weight, &block.wk.bias)).collect();
    let v: Vec<Vec<f64>> = normed.iter().map(|r| linear(r, &block.wv.weight, &block.wv.bias)).collect();
    let mut concat = vec![vec![0.0; 4]; 3];
    for head in 0..2 {
        let cols = head * 2..head * 2 + 2;
        for t in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|s| cols.clone().map(|c| q[t][c] * kk[s][c]).sum::<f64>() / 2f64.sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in cols.clone() {
                concat[t][c] = (0..3).map(|s| scores[s].exp() / z * v[s][c]).sum();
            }
        }
    }
    for t in 0..3 {
        oracle.row_mut(t).copy_from_slice(&linear(&concat[t], &block.wo.weight, &block.wo.bias));
    }
    let mhsa_worst = mhsa_forward(&x, block).max_abs_diff(&oracle);

    // CA on a 3x3 grid with S = 3
    let d = 4;
    let conv1 = |s: u64| {
        Conv2dParams::new(
            seeded_init(&[d, d, 1, 1], Init::TruncNormal { std: 0.8 }, s),
            seeded_init(&[d], Init::TruncNormal { std: 0.8 }, s + 1),
            1,
        )
        .unwrap()
    };
    let ca = CaParams { q: conv1(60), k: conv1(62), v: conv1(64) };
    let m: Tensor<f64> = seeded_init(&[d, 3, 3], Init::TruncNormal { std: 1.0 }, 66);
    let (qm, km, vm) = (conv_oracle(&m, &ca.q), conv_oracle(&m, &ca.k), conv_oracle(&m, &ca.v));
    let at = |t: &Tensor<f64>, c: usize, yy: usize, xx: usize| t.data()[(c * 3 + yy) * 3 + xx];
    let mut ca_oracle = Tensor::zeros(&[d, 3, 3]);
    for c in 0..d {
        for yy in 0..3usize {
            for xx in 0..3usize {
                let mut nb = Vec::new();
                for ny in yy.saturating_sub(1)..(yy + 2).min(3) {
                    for nx in xx.saturating_sub(1)..(xx + 2).min(3) {
                        nb.push((at(&qm, c, yy, xx) * at(&km, c, ny, nx) / (d as f64).sqrt(), at(&vm, c, ny, nx)));
                    }
                }
                let z: f64 = nb.iter().map(|(l, _)| l.exp()).sum();
                ca_oracle.data_mut()[(c * 3 + yy) * 3 + xx] = nb.iter().map(|(l, val)| l.exp() / z * val).sum();
            }
        }
    }
    let ca_worst = ca_forward(&m, &ca, 3).unwrap().max_abs_diff(&ca_oracle);

    // group averaging over 3 random experts with inherited knowledge
    let mcfg = MoKEConfig::default();
    let experts: Vec<Expert<f64>> = (0..3u64)
        .map(|i| {
            let mut p = MoKEParams::<f64>::init(8, &mcfg, Operators { mrf: true, ca: true }, &mut SeedStream::new(70 + i));
            randomize(&mut p, 80 + i, 0.4);
            Expert::Moke(p)
        })
        .collect();
    let group = ExpertGroup { layer: 0, site: Site::Mhsa, experts: experts.clone() };
    let x: Tensor<f64> = seeded_init(&[17, 8], Init::TruncNormal { std: 1.0 }, 90);
    let prev = GenerationState {
        knowledge: (0..3).map(|i| seeded_init(&[17, 8], Init::TruncNormal { std: 1.0 }, 91 + i)).collect(),
    };
    let (kg, _) = group_forward(&x, &group, &prev, &mcfg).unwrap();
    let outs: Vec<Tensor<f64>> = experts
        .iter()
        .zip(&prev.knowledge)
        .map(|(e, k)| match e {
            Expert::Moke(p) => moke_forward(&x.add(k), p, &mcfg).unwrap(),
            _ => unreachable!(),
        })
        .collect();
    let mean = Tensor::from_fn(&[17, 8], |j| outs.iter().map(|o| o.data()[j]).sum::<f64>() / 3.0);
    let group_worst = kg.max_abs_diff(&mean);

    let all = conv_worst.max(mhsa_worst).max(ca_worst).max(group_worst);
    outcome(
        all < 1e-10,
        format!("max |diff|: conv2d {conv_worst:.1e}, MHSA {mhsa_worst:.1e}, CA {ca_worst:.1e}, group mean {group_worst:.1e}"),
    )
}

// 6 ------------------------------------------------------------------------

fn backbone_bytes(m: &AUFormer<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, &m.backbone.named("")).unwrap();
    buf
}

fn param_oracle(cfg: &ModelConfig) -> (usize, usize) {
    let v = &cfg.vit;
    let (dd, d, n, l) = (v.dim, cfg.moke.d, cfg.num_aus, v.depth);
    let hidden = (v.dim as f64 * v.mlp_ratio) as usize;
    let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
    let expert = conv(d, dd, 1) + conv(d, d, 3) + 3 * conv(d, d, 3) + conv(d, 3 * d, 1) + 3 * conv(d, d, 1) + conv(dd, d, 1);
    let heads = (n * dd + n) + n * (dd + 1);
    let learnable = 2 * l * n * expert + heads;
    let tokens = (v.image_size / v.patch_size).pow(2) + 1;
    let block = 2 * (2 * dd) + 4 * (dd * dd + dd) + (hidden * dd + hidden) + (dd * hidden + dd);
    let frozen = dd * v.in_chans * v.patch_size * v.patch_size + dd + dd + tokens * dd + l * block;
    (learnable, frozen)
}

fn freeze_and_params() -> Outcome {
    let cfg = desk();
    let mut model = AUFormer::<f32>::init(cfg.clone(), 21).unwrap();
    let before = backbone_bytes(&model);
    let spec = SyntheticSpec { samples: 64, ..SyntheticSpec::default() };
    let data = Dataset { samples: generate_records(&spec).unwrap() };
    let learn_before = model.learnable.clone();
    let tc = TrainConfig { epochs: 2, batch_size: 16, ..TrainConfig::default() };
    train(&mut model, &data, &tc, &LossSettings::default()).unwrap();
    let frozen_ok = backbone_bytes(&model) == before;
    let moved = model.learnable != learn_before;
    let counts = count_params(&model);
    let (learnable, frozen) = param_oracle(&cfg);
    let mut bare_cfg = cfg.clone();
    bare_cfg.ablation.petl = false;
    let bare = count_params(&AUFormer::<f32>::init(bare_cfg, 21).unwrap());
    let ok = frozen_ok
        && moved
        && counts.learnable == learnable
        && counts.frozen == frozen
        && counts.ratio < 0.2
        && bare.learnable == 4 * 64 + 4;
    outcome(
        ok,
        format!(
            "backbone byte-identical after training: {frozen_ok}; learnable {} (oracle {learnable}), frozen {} (oracle {frozen}), ratio {:.2}%; head-only count {}",
            counts.learnable,
            counts.frozen,
            counts.ratio * 100.0,
            bare.learnable
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn synthetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let mut full_train = Vec::new();
    let mut full_test = Vec::new();
    let mut base_test = Vec::new();
    let mut epochs = Vec::new();
    let mut frozen = true;
    let mut sizes = (0, 0);
    for seed in 0..5u64 {
        let data = Dataset { samples: generate_records(&small_spec(320, seed)).unwrap() };
        for collab in [true, false] {
            let mut cfg = RunConfig::default();
            cfg.vit = small_vit();
            cfg.train.seed = seed;
            cfg.train.learning_rate = 3e-3;
            cfg.train.target_train_f1 = Some(0.95);
            cfg.data.test_fold = 2;
            cfg.ablation.collab = collab;
            let out = run_training(&cfg, &data).unwrap();
            let fresh = AUFormer::<f32>::init(out.model.config.clone(), seed).unwrap();
            frozen &= backbone_bytes(&fresh) == backbone_bytes(&out.model);
            sizes = (out.report.train_samples, out.report.test_samples);
            if collab {
                full_train.push(out.train_metrics.avg_f1);
                full_test.push(out.test_metrics.avg_f1);
                epochs.push(out.history.epochs.len());
            } else {
                base_test.push(out.test_metrics.avg_f1);
            }
        }
    }
    let reached = full_train.iter().filter(|&&f| f >= 0.95).count();
    let (mf, mb) = (median(full_test.clone()), median(base_test.clone()));
    let (fast, t) = timed(Duration::from_secs(600), start);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        reached == 5 && mf >= mb - 0.02 && frozen && fast,
        format!(
            "split {}/{}; full model reached train F1 >= 0.95 in {reached}/5 seeds (epochs {epochs:?}, train F1 {}); test F1 median full {mf:.3} [{}] vs collab-off {mb:.3} [{}]; {t}",
            sizes.0,
            sizes.1,
            fmt(&full_train),
            fmt(&full_test),
            fmt(&base_test)
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn ablation_plumbing() -> Outcome {
    // (petl, collab, mrf, ca, gamma, margin), one per table row
    let rows = [
        (false, false, false, false, false, false),
        (false, false, false, false, true, true),
        (true, false, false, false, false, false),
        (true, true, false, false, false, false),
        (true, true, false, false, true, true),
        (true, false, true, true, false, false),
        (true, true, true, false, false, false),
        (true, true, false, true, false, false),
        (true, true, true, true, false, false),
        (true, true, true, true, true, false),
        (true, true, true, true, true, true),
    ];
    let data = Dataset { samples: generate_records(&small_spec(48, 3)).unwrap() };
    let mut hashes = Vec::new();
    let mut metrics = Vec::new();
    let mut failures = Vec::new();
    for (i, &(petl, collab, mrf, ca, gamma, margin)) in rows.iter().enumerate() {
        let mut cfg = RunConfig::default();
        cfg.vit = small_vit();
        cfg.train.epochs = 2;
        cfg.train.batch_size = 16;
        cfg.ablation.petl = petl;
        cfg.ablation.collab = collab;
        cfg.ablation.mrf = mrf;
        cfg.ablation.ca = ca;
        cfg.ablation.gamma = gamma;
        cfg.ablation.margin = margin;
        match run_training(&cfg, &data) {
            Ok(out) => {
                let mut r = out.report.clone();
                hashes.push(r.config_hash.clone());
                r.config_hash.clear();
                metrics.push(serde_json::to_string(&r).unwrap());
            }
            Err(e) => failures.push(format!("row {}: {e}", i + 1)),
        }
    }
    let distinct = |v: &[String]| {
        let mut s = v.to_vec();
        s.sort();
        s.dedup();
        s.len()
    };
    let (h, m) = (distinct(&hashes), distinct(&metrics));
    outcome(
        failures.is_empty() && h == rows.len() && m == rows.len(),
        format!("{} of {} combinations completed; distinct hashes {h}, distinct metrics {m} {failures:?}", hashes.len(), rows.len()),
    )
}

// 9 ------------------------------------------------------------------------

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut checks = Vec::new();

    let vit = small_vit();
    let bb = Backbone::<f32>::init(&vit, 90).unwrap();
    let wpath = dir.path().join("backbone.aufw");
    bb.save_weights(&wpath).unwrap();
    let first = std::fs::read(&wpath).unwrap();
    Backbone::<f32>::load_weights(&wpath, &vit).unwrap().save_weights(&wpath).unwrap();
    checks.push(("weights write-read-write", std::fs::read(&wpath).unwrap() == first));

    let mut cfg = ModelConfig::new(vit.clone(), MoKEConfig::default(), 4);
    cfg.ablation.mrf = true;
    let model = AUFormer::<f32>::init(cfg, 91).unwrap();
    let cpath = dir.path().join("model.aufw");
    model.save(&cpath).unwrap();
    let ck = std::fs::read(&cpath).unwrap();
    AUFormer::<f32>::load(&cpath).unwrap().save(&cpath).unwrap();
    checks.push(("checkpoint write-read-write", std::fs::read(&cpath).unwrap() == ck));

    let rec: SampleRecord = generate_records(&small_spec(3, 4)).unwrap().remove(2);
    let mut a = Vec::new();
    write_sample(&mut a, &rec).unwrap();
    let back = read_sample(Cursor::new(&a)).unwrap();
    let mut b = Vec::new();
    write_sample(&mut b, &back).unwrap();
    checks.push(("sample write-read-write", a == b && back == rec));

    let mut bad = first.clone();
    bad[0] = b'X';
    checks.push(("weights bad magic", matches!(read_tensors::<f32, _>(Cursor::new(&bad)), Err(Error::Format(_)))));
    let mut badv = first.clone();
    badv[4] = 9;
    checks.push(("weights bad version", matches!(read_tensors::<f32, _>(Cursor::new(&badv)), Err(Error::Format(_)))));
    checks.push((
        "weights truncated",
        matches!(read_tensors::<f32, _>(Cursor::new(&first[..first.len() - 3])), Err(Error::Format(_))),
    ));
    let wide = ViTConfig { dim: 64, heads: 2, ..vit.clone() };
    checks.push(("weights wrong D", matches!(Backbone::<f32>::load_weights(&wpath, &wide), Err(Error::Dimension(_)))));

    let mut bads = a.clone();
    bads[1] = b'X';
    checks.push(("sample bad magic", matches!(read_sample(Cursor::new(&bads)), Err(Error::Format(_)))));
    checks.push(("sample truncated", matches!(read_sample(Cursor::new(&a[..a.len() - 1])), Err(Error::Format(_)))));
    // rank byte at 6, first dim at 7..11
    let mut huge = a.clone();
    huge[7..11].copy_from_slice(&(1u32 << 31).to_le_bytes());
    checks.push(("sample dim >= 2^31", matches!(read_sample(Cursor::new(&huge)), Err(Error::Format(_)))));

    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(failed.is_empty(), format!("{} checks, failed: {failed:?}", checks.len()))
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("identity at init", identity_at_init),
        ("gradient suite", gradient_suite),
        ("closed-form negative gradient", closed_form_gradient),
        ("loss reductions and difficulty ordering", loss_reductions),
        ("brute-force oracle equivalence", oracle_equivalence),
        ("backbone freeze and parameter accounting", freeze_and_params),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("ablation plumbing", ablation_plumbing),
        ("format round trips", format_round_trips),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        failed += usize::from(!o.pass);
        println!(
            "criterion {} {:<42} {} ({:.1}s) {}",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
