//! Multi-label objectives over sigmoid outputs, all in f64.
//!
//! Every loss takes probabilities `p = sigmoid(Z)` and labels `y` laid out
//! `[batch, N]`, averages over AUs and then over the batch, and returns its
//! gradient with respect to the logits `Z`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Rng, Tensor};

pub const P_MIN: f64 = 1e-7;
pub const P_MAX: f64 = 1.0 - 1e-7;
pub const RATE_MIN: f64 = 1e-3;

/// User-facing loss knobs; rates come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSettings {
    pub margin: f64,
    pub b_left: f64,
    pub b_right: f64,
    pub eps: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            margin: 0.1,
            b_left: 1.0,
            b_right: 2.0,
            eps: 1.0,
        }
    }
}

impl LossSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.margin) {
            return Err(Error::config(format!("margin must lie in [0, 1], got {}", self.margin)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("dice smoothing term must be positive"));
        }
        if !(self.b_left <= self.b_right) {
            return Err(Error::config("b_left must not exceed b_right"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub rates: Vec<f64>,
    pub weights: Vec<f64>,
    pub gammas: Vec<f64>,
    pub margin: f64,
    pub b_left: f64,
    pub b_right: f64,
    pub eps: f64,
}

impl LossConfig {
    /// `use_gamma = false` fixes every exponent to 1; `use_margin = false`
    /// sets the margin to 0.
    pub fn from_rates(rates: &[f64], s: &LossSettings, use_gamma: bool, use_margin: bool) -> Result<Self> {
        s.validate()?;
        let rates: Vec<f64> = rates.iter().map(|&r| r.clamp(RATE_MIN, 1.0)).collect();
        let weights = class_weights(&rates)?;
        let gammas = if use_gamma {
            gamma_schedule(&rates, s.b_left, s.b_right)?
        } else {
            vec![1.0; rates.len()]
        };
        Ok(Self {
            rates,
            weights,
            gammas,
            margin: if use_margin { s.margin } else { 0.0 },
            b_left: s.b_left,
            b_right: s.b_right,
            eps: s.eps,
        })
    }

    pub fn num_aus(&self) -> usize {
        self.weights.len()
    }
}

/// `ω_i = N·(1/r_i) / Σ_j 1/r_j`, so that `Σ ω_i = N`.
pub fn class_weights(rates: &[f64]) -> Result<Vec<f64>> {
    if rates.is_empty() {
        return Err(Error::config("class weights need at least one rate"));
    }
    if let Some(r) = rates.iter().find(|&&r| !(r > 0.0)) {
        return Err(Error::config(format!("occurrence rate must be positive, got {r}")));
    }
    let inv_sum: f64 = rates.iter().map(|r| 1.0 / r).sum();
    let n = rates.len() as f64;
    Ok(rates.iter().map(|r| n * (1.0 / r) / inv_sum).collect())
}

/// `γ_i = B_L + (B_R − B_L)·r_i`.
pub fn gamma_schedule(rates: &[f64], b_left: f64, b_right: f64) -> Result<Vec<f64>> {
    if b_left > b_right {
        return Err(Error::config(format!("B_L ({b_left}) exceeds B_R ({b_right})")));
    }
    Ok(rates.iter().map(|r| b_left + (b_right - b_left) * r).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// `[batch, N]` gradient with respect to the logits.
    pub grad: Tensor<f64>,
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(P_MIN, P_MAX)
}

fn check(p: &Tensor<f64>, y: &Tensor<f64>, n: usize) -> Result<()> {
    if p.shape() != y.shape() || p.rank() != 2 || p.dim(1) != n {
        return Err(Error::shape(format!(
            "expected p and y of shape [batch, {n}], got {:?} and {:?}",
            p.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// Mean over AUs then batch of a per-element `(value, dvalue/dZ)` rule.
fn reduce(
    p: &Tensor<f64>,
    y: &Tensor<f64>,
    term: impl Fn(usize, f64, f64) -> (f64, f64),
) -> LossOutput {
    let (b, n) = (p.dim(0), p.dim(1));
    let scale = 1.0 / (b * n) as f64;
    let mut value = 0.0;
    let mut grad = Tensor::zeros(&[b, n]);
    for s in 0..b {
        for i in 0..n {
            let (v, g) = term(i, clamp_p(p.row(s)[i]), y.row(s)[i]);
            value += v;
            grad.row_mut(s)[i] = g * scale;
        }
    }
    LossOutput {
        value: value * scale,
        grad,
    }
}

/// `−ω·log p` for a positive; its logit gradient is `ω·(p − 1)`.
fn positive_term(w: f64, p: f64) -> (f64, f64) {
    (-w * p.ln(), w * (p - 1.0))
}

/// Negative term `−ω·p_m^γ·log(1 − p_m)` with `p_m = max(p − m, 0)`, and its
/// logit gradient. At `p = m` the right-hand branch is taken, which is 0.
fn negative_term(w: f64, gamma: f64, margin: f64, p: f64) -> (f64, f64) {
    if p < margin {
        return (0.0, 0.0);
    }
    let pm = p - margin;
    if pm == 0.0 {
        return (0.0, 0.0);
    }
    let log1m = (1.0 - pm).ln();
    let value = -w * pm.powf(gamma) * log1m;
    let dp = w * (pm.powf(gamma) / (1.0 - pm) - gamma * pm.powf(gamma - 1.0) * log1m);
    (value, dp * p * (1.0 - p))
}

/// Logit gradient of one negative element (before batch/AU averaging).
pub fn negative_branch_grad(p: f64, gamma: f64, margin: f64, weight: f64) -> f64 {
    negative_term(weight, gamma, margin, clamp_p(p)).1
}

pub fn mdwa_loss(p: &Tensor<f64>, y: &Tensor<f64>, cfg: &LossConfig) -> Result<LossOutput> {
    check(p, y, cfg.num_aus())?;
    Ok(reduce(p, y, |i, p, y| {
        if y > 0.5 {
            positive_term(cfg.weights[i], p)
        } else {
            negative_term(cfg.weights[i], cfg.gammas[i], cfg.margin, p)
        }
    }))
}

pub fn mdwa_grad_analytic(p: &Tensor<f64>, y: &Tensor<f64>, cfg: &LossConfig) -> Result<Tensor<f64>> {
    Ok(mdwa_loss(p, y, cfg)?.grad)
}

/// `ω·(1 − (2yp + ε)/(y² + p² + ε))`.
pub fn wdi_loss(p: &Tensor<f64>, y: &Tensor<f64>, cfg: &LossConfig) -> Result<LossOutput> {
    check(p, y, cfg.num_aus())?;
    let eps = cfg.eps;
    Ok(reduce(p, y, |i, p, y| {
        let w = cfg.weights[i];
        let num = 2.0 * y * p + eps;
        let den = y * y + p * p + eps;
        let value = w * (1.0 - num / den);
        let dp = -w * (2.0 * y * den - num * 2.0 * p) / (den * den);
        (value, dp * p * (1.0 - p))
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub mdwa: f64,
    pub wdi: f64,
    pub aux_mdwa: f64,
    pub grad: Tensor<f64>,
    pub aux_grad: Option<Tensor<f64>>,
}

/// `MDWA(p) + WDI(p) + MDWA(aux_p)`; the auxiliary term is dropped when
/// there are no auxiliary predictions.
pub fn total_loss(
    p: &Tensor<f64>,
    aux_p: Option<&Tensor<f64>>,
    y: &Tensor<f64>,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    let m = mdwa_loss(p, y, cfg)?;
    let w = wdi_loss(p, y, cfg)?;
    let aux = aux_p.map(|a| mdwa_loss(a, y, cfg)).transpose()?;
    let aux_value = aux.as_ref().map_or(0.0, |a| a.value);
    Ok(TotalLoss {
        value: m.value + w.value + aux_value,
        mdwa: m.value,
        wdi: w.value,
        aux_mdwa: aux_value,
        grad: m.grad.add(&w.grad),
        aux_grad: aux.map(|a| a.grad),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceLosses {
    pub wce: LossOutput,
    pub wa: LossOutput,
    pub mwa: LossOutput,
}

/// Baselines the MDWA loss is compared against: weighted BCE, the weighted
/// asymmetric loss with a constant focusing exponent `wa_gamma`, and MDWA
/// with every exponent fixed to 1.
pub fn reference_losses(
    p: &Tensor<f64>,
    y: &Tensor<f64>,
    weights: &[f64],
    wa_gamma: f64,
    margin: f64,
) -> Result<ReferenceLosses> {
    let n = weights.len();
    check(p, y, n)?;
    let wce = reduce(p, y, |i, p, y| {
        let w = weights[i];
        if y > 0.5 {
            positive_term(w, p)
        } else {
            (-w * (1.0 - p).ln(), w * p)
        }
    });
    let fixed = |gamma: f64, margin: f64| LossConfig {
        rates: vec![1.0; n],
        weights: weights.to_vec(),
        gammas: vec![gamma; n],
        margin,
        b_left: gamma,
        b_right: gamma,
        eps: 1.0,
    };
    Ok(ReferenceLosses {
        wce,
        wa: mdwa_loss(p, y, &fixed(wa_gamma, 0.0))?,
        mwa: mdwa_loss(p, y, &fixed(1.0, margin))?,
    })
}

/// Negative-branch logit gradients on a uniform `p` grid in `(0, 1)`:
/// columns `p, wce, wa, mwa` and one MDWA column per AU exponent.
pub struct Curves {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn gradient_curves(cfg: &LossConfig, wa_gamma: f64, points: usize) -> Curves {
    let mut header: Vec<String> = ["p", "wce", "wa", "mwa"].map(String::from).to_vec();
    header.extend(cfg.gammas.iter().enumerate().map(|(i, g)| format!("mdwa_au{i}_gamma{g:.3}")));
    let rows = (1..=points)
        .map(|k| {
            let p = k as f64 / (points + 1) as f64;
            let mut row = vec![p, p, negative_branch_grad(p, wa_gamma, 0.0, 1.0), negative_branch_grad(p, 1.0, cfg.margin, 1.0)];
            row.extend(cfg.gammas.iter().map(|&g| negative_branch_grad(p, g, cfg.margin, 1.0)));
            row
        })
        .collect();
    Curves { header, rows }
}

impl Curves {
    pub fn to_csv(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.10e}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-6;
/// Points this close to the `p = m` kink are skipped.
pub const KINK_GAP: f64 = 1e-4;
/// Denominator floor for relative errors, so near-zero gradients are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedLoss {
    Mdwa,
    Wdi,
    Total,
}

impl CheckedLoss {
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        match s {
            "all" => Ok(vec![Self::Mdwa, Self::Wdi, Self::Total]),
            "mdwa" => Ok(vec![Self::Mdwa]),
            "wdi" => Ok(vec![Self::Wdi]),
            "total" => Ok(vec![Self::Total]),
            other => Err(Error::config(format!("unknown loss selection {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradPoint {
    pub p: f64,
    pub y: f64,
    pub gamma: f64,
    pub margin: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub loss: CheckedLoss,
    pub point: GradPoint,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare analytic logit gradients with central differences at `points`
/// random single-element problems per selected loss. `flip_sign` negates
/// the analytic value; it exists to prove the check can fail.
pub fn gradcheck(losses: &[CheckedLoss], points: usize, seed: u64, flip_sign: bool) -> Result<Vec<GradCheckEntry>> {
    if points == 0 {
        return Err(Error::config("gradcheck needs at least one point"));
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(points * losses.len());
    for &loss in losses {
        let mut done = 0;
        while done < points {
            let z = rng.uniform_range(-6.0, 6.0);
            let p = sigmoid(z);
            let point = GradPoint {
                p,
                y: if rng.bernoulli(0.5) { 1.0 } else { 0.0 },
                gamma: rng.uniform_range(0.5, 3.0),
                margin: rng.uniform_range(0.0, 0.5),
                weight: rng.uniform_range(0.2, 3.0),
            };
            if point.y == 0.0 && (p - point.margin).abs() < KINK_GAP {
                continue;
            }
            let cfg = LossConfig {
                rates: vec![1.0],
                weights: vec![point.weight],
                gammas: vec![point.gamma],
                margin: point.margin,
                b_left: 1.0,
                b_right: 2.0,
                eps: 1.0,
            };
            let y = Tensor::new(&[1, 1], vec![point.y])?;
            let eval = |z: f64| -> Result<(f64, f64)> {
                let p = Tensor::new(&[1, 1], vec![sigmoid(z)])?;
                Ok(match loss {
                    CheckedLoss::Mdwa => {
                        let o = mdwa_loss(&p, &y, &cfg)?;
                        (o.value, o.grad.data()[0])
                    }
                    CheckedLoss::Wdi => {
                        let o = wdi_loss(&p, &y, &cfg)?;
                        (o.value, o.grad.data()[0])
                    }
                    CheckedLoss::Total => {
                        // aux predictions share the logit here, so the
                        // derivative is the sum of both gradients
                        let o = total_loss(&p, Some(&p), &y, &cfg)?;
                        (o.value, o.grad.data()[0] + o.aux_grad.expect("aux").data()[0])
                    }
                })
            };
            let (_, mut analytic) = eval(z)?;
            if flip_sign {
                analytic = -analytic;
            }
            let numeric = (eval(z + FD_STEP)?.0 - eval(z - FD_STEP)?.0) / (2.0 * FD_STEP);
            out.push(GradCheckEntry {
                loss,
                rel_err: rel_err(analytic, numeric),
                point,
                analytic,
                numeric,
            });
            done += 1;
        }
    }
    Ok(out)
}
