//! Finite-difference checks of every hand-written backward pass.
//!
//! Each check draws random small instances, differentiates a random linear
//! projection of the op's output (or the loss itself) numerically, and
//! compares with the analytic gradient by relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::head::{batch_loss_grads, forward_cached, HeadWeights};
use crate::loss::{loss, loss_grad, loss_on_logits, CsLossParams, LossKind};
use crate::nn::{
    conv2d, conv2d_backward, lrn, lrn_backward, maxpool2d, maxpool2d_backward, numeric_grad,
    relative_error, softmax2, softmax2_backward, Conv2dParams, LrnParams, Tensor,
};

/// Pass threshold on relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// `Σ r·y` for a fixed random `r`, accumulated in 64-bit.
fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

fn concat(parts: &[&Tensor]) -> Vec<f32> {
    parts
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect()
}

fn conv_instance(rng: &mut ChaCha8Rng, dilation: usize) -> Result<f64> {
    let n = rng.random_range(1..=2);
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=2);
    let span = dilation * (k - 1) + 1;
    let h = rng.random_range(span.max(3)..=span + 5);
    let w = rng.random_range(span.max(3)..=span + 5);
    let p = Conv2dParams::new(stride, dilation, pad);
    let x = Tensor::randn(&[n, cin, h, w], 1.0, rng);
    let kern = Tensor::randn(&[cout, cin, k, k], 1.0, rng);
    let bias = Tensor::randn(&[cout], 1.0, rng);
    let y = conv2d(&x, &kern, &bias, p)?;
    let r = Tensor::randn(y.shape(), 1.0, rng);
    let g = conv2d_backward(&x, &kern, p, &r)?;
    let eps = 1e-2;
    let nx = numeric_grad(
        |t| project(&conv2d(t, &kern, &bias, p).unwrap(), &r),
        &x,
        eps,
    );
    let nk = numeric_grad(
        |t| project(&conv2d(&x, t, &bias, p).unwrap(), &r),
        &kern,
        eps,
    );
    let nb = numeric_grad(
        |t| project(&conv2d(&x, &kern, t, p).unwrap(), &r),
        &bias,
        eps,
    );
    Ok(relative_error(
        &concat(&[&g.input, &g.kernel, &g.bias]),
        &concat(&[&nx, &nk, &nb]),
    ))
}

fn lrn_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = rng.random_range(2..=8);
    let shape = [1, c, rng.random_range(2..=4), rng.random_range(2..=4)];
    // pixel-scale activations so the normaliser is far from constant
    let x = Tensor::randn(&shape, 60.0, rng);
    let p = LrnParams::default();
    let r = Tensor::randn(&shape, 1.0, rng);
    let g = lrn_backward(&x, &r, &p)?;
    let num = numeric_grad(|t| project(&lrn(t, &p).unwrap(), &r), &x, 5e-2);
    Ok(relative_error(g.data(), num.data()))
}

fn maxpool_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = rng.random_range(1..=3);
    let h = rng.random_range(3..=8);
    let w = rng.random_range(3..=8);
    let len = c * h * w;
    // distinct values 0.05 apart keep every ±eps probe on the same argmax
    let mut vals: Vec<f32> = (0..len).map(|i| i as f32 * 0.05).collect();
    for i in (1..len).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::new(&[1, c, h, w], vals)?;
    let (k, s) = (3, 2);
    let out = maxpool2d(&x, k, s)?;
    let r = Tensor::randn(out.output.shape(), 1.0, rng);
    let g = maxpool2d_backward(x.shape(), &out.argmax, &r)?;
    let num = numeric_grad(
        |t| project(&maxpool2d(t, k, s).unwrap().output, &r),
        &x,
        1e-2,
    );
    Ok(relative_error(g.data(), num.data()))
}

fn softmax_instance(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.random_range(1..=6);
    let x = Tensor::randn(&[n, 2], 1.0, rng);
    let r = Tensor::randn(&[n, 2], 1.0, rng);
    let probs = softmax2(&x)?;
    let g = softmax2_backward(&probs, &r)?;
    let num = numeric_grad(|t| project(&softmax2(t).unwrap(), &r), &x, 1e-2);
    Ok(relative_error(g.data(), num.data()))
}

/// Input gradient of the mean loss through the whole head. An instance
/// where some ±eps probe flips the sign of a pre-activation (crosses a relu
/// kink) is redrawn, since the difference quotient is meaningless there.
fn head_instance(rng: &mut ChaCha8Rng, kind: LossKind) -> Result<f64> {
    let eps = 1e-2f32;
    let params = CsLossParams::default();
    let signs = |w: &HeadWeights, x: &Tensor| -> Result<Vec<bool>> {
        let f = forward_cached(w, x)?;
        Ok(f.z4
            .data()
            .iter()
            .chain(f.z5.data())
            .map(|&v| v > 0.0)
            .collect())
    };
    'draw: loop {
        let (k, hidden, s) = (3, 4, 3);
        let mut w = HeadWeights::random(k, hidden, rng.random());
        for l in [&mut w.conv4, &mut w.conv5, &mut w.conv6] {
            l.kernel.scale(40.0);
            l.bias = Tensor::randn(l.bias.shape(), 0.5, rng);
        }
        let x = Tensor::randn(&[2, k, s, s], 1.0, rng);
        let base = signs(&w, &x)?;
        let mut probe = x.clone();
        for i in 0..x.len() {
            for d in [eps, -eps] {
                probe.data_mut()[i] = x.data()[i] + d;
                if signs(&w, &probe)? != base {
                    continue 'draw;
                }
            }
            probe.data_mut()[i] = x.data()[i];
        }
        let labels = [rng.random_bool(0.5), rng.random_bool(0.5)];
        let (_, g) = batch_loss_grads(&w, &x, &labels, kind, &params)?;
        let num = numeric_grad(
            |t| batch_loss_grads(&w, t, &labels, kind, &params).unwrap().0,
            &x,
            eps,
        );
        return Ok(relative_error(g.input.data(), num.data()));
    }
}

fn rel(a: f64, b: f64) -> f64 {
    let d = a.abs().max(b.abs());
    if d < 1e-12 {
        (a - b).abs()
    } else {
        (a - b).abs() / d
    }
}

/// Gradient w.r.t. the positive probability and w.r.t. the logits.
fn loss_instance(rng: &mut ChaCha8Rng, kind: LossKind) -> Result<f64> {
    let params = CsLossParams::default();
    let positive = rng.random_bool(0.5);
    let p = rng.random_range(0.02..0.98);
    let h = 1e-6;
    let num_p =
        (loss(kind, p + h, positive, &params) - loss(kind, p - h, positive, &params)) / (2.0 * h);
    let e1 = rel(loss_grad(kind, p, positive, &params), num_p);

    let logits = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
    let (_, g) = loss_on_logits(kind, logits, positive, &params);
    let mut e2: f64 = 0.0;
    for c in 0..2 {
        let mut up = logits;
        let mut dn = logits;
        up[c] += h;
        dn[c] -= h;
        let num = (loss_on_logits(kind, up, positive, &params).0
            - loss_on_logits(kind, dn, positive, &params).0)
            / (2.0 * h);
        e2 = e2.max(rel(g[c], num));
    }
    Ok(e1.max(e2))
}

fn run(
    name: &str,
    instances: usize,
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&mut ChaCha8Rng) -> Result<f64>,
) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        worst = worst.max(f(rng)?);
    }
    Ok(CheckResult {
        name: name.to_string(),
        instances,
        max_rel_error: worst,
    })
}

/// Runs every check on `instances` random instances.
pub fn grad_check_suite(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    Ok(vec![
        run("conv2d", instances, r, |g| conv_instance(g, 1))?,
        run("conv2d_dilation3", instances, r, |g| conv_instance(g, 3))?,
        run("lrn", instances, r, lrn_instance)?,
        run("maxpool", instances, r, maxpool_instance)?,
        run("softmax2", instances, r, softmax_instance)?,
        run("head", instances, r, |g| head_instance(g, LossKind::Ce))?,
        run("head_cs", instances, r, |g| head_instance(g, LossKind::Cs))?,
        run("loss_ce", instances, r, |g| loss_instance(g, LossKind::Ce))?,
        run("loss_focal", instances, r, |g| {
            loss_instance(g, LossKind::Focal)
        })?,
        run("loss_cs", instances, r, |g| loss_instance(g, LossKind::Cs))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        for r in grad_check_suite(3, 5).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
