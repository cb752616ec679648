//! Cross-entropy, focal and cost-sensitive classification losses on the
//! probability of the true class, with gradients w.r.t. the positive-class
//! probability and w.r.t. two-class logits.
//!
//! The cost-sensitive loss multiplies cross-entropy by
//! `m(p_t) = 1 / (1 + exp(alpha·(beta − (1 − p_t)^gamma)))`, a sigmoid gate
//! that is close to one for hard candidates (`p_t` small) and decays towards
//! zero for easy ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax_pair;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Index of the background logit in `[background, target]` pairs.
pub const BACKGROUND: usize = 0;
/// Index of the target logit.
pub const TARGET: usize = 1;

/// Gate exponent beyond which the modulating factor is taken as exactly 0.
const GATE_OVERFLOW: f64 = 80.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsLossParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Focusing exponent of the focal variant.
    pub nu: f64,
}

impl Default for CsLossParams {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 0.2,
            gamma: 2.0,
            nu: 1.0,
        }
    }
}

impl CsLossParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && (0.0..=1.0).contains(&self.beta)
            && self.gamma > 0.0
            && self.nu >= 0.0
            && [self.alpha, self.gamma, self.nu]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "loss params out of range: {self:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Focal,
    Cs,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "focal" => Ok(LossKind::Focal),
            "cs" => Ok(LossKind::Cs),
            other => Err(Error::InvalidArgument(format!(
                "unknown loss kind {other:?}"
            ))),
        }
    }
}

/// A predicted positive-class probability and its binary label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledProb {
    pub p: f64,
    pub positive: bool,
}

pub fn p_t(p: f64, positive: bool) -> f64 {
    if positive {
        p
    } else {
        1.0 - p
    }
}

fn clamp(q: f64) -> f64 {
    q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `m(p_t)` together with `dm/dp_t`.
fn gate(pt: f64, params: &CsLossParams) -> (f64, f64) {
    let one_minus = (1.0 - pt).max(0.0);
    let u = params.alpha * (params.beta - one_minus.powf(params.gamma));
    if u > GATE_OVERFLOW {
        return (0.0, 0.0);
    }
    let m = 1.0 / (1.0 + u.exp());
    // du/dpt = alpha·gamma·(1 − pt)^(gamma − 1)
    let du = if one_minus == 0.0 && params.gamma < 1.0 {
        0.0
    } else {
        params.alpha * params.gamma * one_minus.powf(params.gamma - 1.0)
    };
    (m, -m * (1.0 - m) * du)
}

/// The cost-sensitive modulating factor on the true-class probability.
pub fn modulating_factor(pt: f64, params: &CsLossParams) -> f64 {
    gate(pt, params).0
}

pub fn ce_loss(p: f64, positive: bool) -> f64 {
    -clamp(p_t(p, positive)).ln()
}

pub fn focal_loss(p: f64, positive: bool, nu: f64) -> f64 {
    let q = clamp(p_t(p, positive));
    -(1.0 - q).powf(nu) * q.ln()
}

pub fn cs_loss(p: f64, positive: bool, params: &CsLossParams) -> f64 {
    let q = clamp(p_t(p, positive));
    -q.ln() * modulating_factor(q, params)
}

pub fn loss(kind: LossKind, p: f64, positive: bool, params: &CsLossParams) -> f64 {
    match kind {
        LossKind::Ce => ce_loss(p, positive),
        LossKind::Focal => focal_loss(p, positive, params.nu),
        LossKind::Cs => cs_loss(p, positive, params),
    }
}

/// `q · dL/dq` at true-class probability `q`, written without dividing by
/// `q` so it stays finite as `q → 0`.
fn scaled_pt_grad(kind: LossKind, q: f64, params: &CsLossParams) -> f64 {
    let ln_q = clamp(q).ln();
    match kind {
        LossKind::Ce => -1.0,
        LossKind::Focal => {
            let nu = params.nu;
            let tail = if nu == 0.0 {
                0.0
            } else {
                nu * (1.0 - q).max(0.0).powf(nu - 1.0) * q * ln_q
            };
            tail - (1.0 - q).max(0.0).powf(nu)
        }
        LossKind::Cs => {
            let (m, dm) = gate(clamp(q), params);
            -m - ln_q * q * dm
        }
    }
}

/// `dL/dp` w.r.t. the positive-class probability, evaluated at the clamped
/// point.
pub fn loss_grad(kind: LossKind, p: f64, positive: bool, params: &CsLossParams) -> f64 {
    let q = clamp(p_t(p, positive));
    let d_dq = scaled_pt_grad(kind, q, params) / q;
    if positive {
        d_dq
    } else {
        -d_dq
    }
}

pub fn cs_loss_grad(p: f64, positive: bool, params: &CsLossParams) -> f64 {
    loss_grad(LossKind::Cs, p, positive, params)
}

/// Loss and its gradient w.r.t. `[background, target]` logits.
pub fn loss_on_logits(
    kind: LossKind,
    logits: [f64; 2],
    positive: bool,
    params: &CsLossParams,
) -> (f64, [f64; 2]) {
    let (_, p_pos) = softmax_pair(logits[0], logits[1]);
    let q = p_t(p_pos, positive);
    let value = loss(kind, p_pos, positive, params);
    // dq/dl_true = q(1 − q) and dq/dl_other = −q(1 − q)
    let g = scaled_pt_grad(kind, q, params) * (1.0 - q);
    let grad = if positive { [-g, g] } else { [g, -g] };
    (value, grad)
}

/// Mean loss over a batch and per-sample gradients of that mean w.r.t. each
/// positive-class probability.
pub fn batch_loss(
    batch: &[LabeledProb],
    kind: LossKind,
    params: &CsLossParams,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty loss batch".into()));
    }
    let n = batch.len() as f64;
    let mean = batch
        .iter()
        .map(|s| loss(kind, s.p, s.positive, params))
        .sum::<f64>()
        / n;
    let grads = batch
        .iter()
        .map(|s| loss_grad(kind, s.p, s.positive, params) / n)
        .collect();
    Ok((mean, grads))
}
