//! Online classifier head over masked RoI features:
//! conv4 (3×1) → relu → conv5 (1×3) → relu → conv6 (1×1, two maps) →
//! spatial mean → `[background, target]` logits → softmax.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::ConvLayer;
use crate::error::{Error, Result};
use crate::loss::{loss_on_logits, CsLossParams, LossKind, TARGET};
use crate::nn::{
    conv2d, conv2d_backward, relu, relu_backward, sgd_step, softmax_pair, Conv2dParams, SgdConfig,
    Tensor,
};

/// Channel width of conv4/conv5.
pub const HEAD_HIDDEN: usize = 256;
/// Init std of every head kernel.
pub const HEAD_INIT_STD: f32 = 0.01;

const CONV4: Conv2dParams = Conv2dParams {
    stride: 1,
    dilation: 1,
    padding: (1, 0),
};
const CONV5: Conv2dParams = Conv2dParams {
    stride: 1,
    dilation: 1,
    padding: (0, 1),
};
const CONV6: Conv2dParams = Conv2dParams {
    stride: 1,
    dilation: 1,
    padding: (0, 0),
};

const SCORE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub conv4: ConvLayer,
    pub conv5: ConvLayer,
    pub conv6: ConvLayer,
}

fn layer(shape: [usize; 4], rng: &mut impl Rng) -> ConvLayer {
    ConvLayer {
        kernel: Tensor::randn(&shape, HEAD_INIT_STD, rng),
        bias: Tensor::zeros(&[shape[0]]),
    }
}

impl HeadWeights {
    /// Gaussian kernels, zero biases.
    pub fn random(k: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            conv4: layer([hidden, k, 3, 1], &mut rng),
            conv5: layer([hidden, hidden, 1, 3], &mut rng),
            conv6: layer([2, hidden, 1, 1], &mut rng),
        }
    }

    pub fn zeros(k: usize, hidden: usize) -> Self {
        let z = |s: [usize; 4]| ConvLayer {
            kernel: Tensor::zeros(&s),
            bias: Tensor::zeros(&[s[0]]),
        };
        Self {
            conv4: z([hidden, k, 3, 1]),
            conv5: z([hidden, hidden, 1, 3]),
            conv6: z([2, hidden, 1, 1]),
        }
    }

    /// Input channel count K.
    pub fn in_channels(&self) -> usize {
        self.conv4.kernel.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.conv4.kernel.shape()[0]
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.kernel.is_finite() && l.bias.is_finite())
    }

    fn layers(&self) -> [&ConvLayer; 3] {
        [&self.conv4, &self.conv5, &self.conv6]
    }
}

/// Head with the default hidden width.
pub fn init_head(seed: u64, k: usize) -> HeadWeights {
    HeadWeights::random(k, HEAD_HIDDEN, seed)
}

/// A masked RoI feature with its label and the frame it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub feature: Tensor,
    pub positive: bool,
    pub frame: usize,
}

/// Intermediate activations of a batched forward pass.
#[derive(Clone, Debug)]
pub struct HeadForward {
    pub z4: Tensor,
    pub a4: Tensor,
    pub z5: Tensor,
    pub a5: Tensor,
    pub z6: Tensor,
    pub logits: Vec<[f64; 2]>,
}

/// Forward pass over an `N×K×H×W` batch, keeping activations.
pub fn forward_cached(w: &HeadWeights, batch: &Tensor) -> Result<HeadForward> {
    let z4 = conv2d(batch, &w.conv4.kernel, &w.conv4.bias, CONV4)?;
    let a4 = relu(&z4);
    let z5 = conv2d(&a4, &w.conv5.kernel, &w.conv5.bias, CONV5)?;
    let a5 = relu(&z5);
    let z6 = conv2d(&a5, &w.conv6.kernel, &w.conv6.bias, CONV6)?;
    let (n, _, h, wd) = z6.dims4("head")?;
    let hw = h * wd;
    let logits = (0..n)
        .map(|i| {
            std::array::from_fn(|c| {
                z6.data()[(i * 2 + c) * hw..][..hw]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / hw as f64
            })
        })
        .collect();
    Ok(HeadForward {
        z4,
        a4,
        z5,
        a5,
        z6,
        logits,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadScore {
    pub f_pos: f64,
    pub f_neg: f64,
    pub logits: [f64; 2],
}

impl HeadScore {
    fn from_logits(logits: [f64; 2]) -> Self {
        let (f_neg, f_pos) = softmax_pair(logits[0], logits[1]);
        Self {
            f_pos,
            f_neg,
            logits,
        }
    }
}

/// Scores one `K×H×W` feature.
pub fn head_forward(feature: &Tensor, w: &HeadWeights) -> Result<HeadScore> {
    let (k, h, wd) = feature.dims3("head_forward")?;
    let batch = feature.clone().reshape(&[1, k, h, wd])?;
    Ok(HeadScore::from_logits(forward_cached(w, &batch)?.logits[0]))
}

/// Scores many features, chunked and spread over the rayon pool.
pub fn score_batch(w: &HeadWeights, features: &[Tensor]) -> Result<Vec<HeadScore>> {
    let chunks: Vec<Vec<HeadScore>> = features
        .par_chunks(SCORE_CHUNK)
        .map(|chunk| {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let fwd = forward_cached(w, &Tensor::stack(&refs)?)?;
            Ok(fwd.logits.into_iter().map(HeadScore::from_logits).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Parameter gradients per layer plus the gradient w.r.t. the input batch.
#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub conv4: ConvLayer,
    pub conv5: ConvLayer,
    pub conv6: ConvLayer,
    pub input: Tensor,
}

/// Back-propagates `dL/dlogits` (one pair per batch item) through the head.
pub fn head_backward(
    w: &HeadWeights,
    batch: &Tensor,
    fwd: &HeadForward,
    grad_logits: &[[f64; 2]],
) -> Result<HeadGrads> {
    let (n, _, h, wd) = fwd.z6.dims4("head_backward")?;
    if grad_logits.len() != n {
        return Err(Error::shape(
            "head_backward",
            format!("{} logit gradients for a batch of {n}", grad_logits.len()),
        ));
    }
    let hw = h * wd;
    let mut g6 = Tensor::zeros(&[n, 2, h, wd]);
    for (i, g) in grad_logits.iter().enumerate() {
        for (c, &gc) in g.iter().enumerate() {
            g6.data_mut()[(i * 2 + c) * hw..][..hw].fill((gc / hw as f64) as f32);
        }
    }
    let b6 = conv2d_backward(&fwd.a5, &w.conv6.kernel, CONV6, &g6)?;
    let g5 = relu_backward(&fwd.z5, &b6.input)?;
    let b5 = conv2d_backward(&fwd.a4, &w.conv5.kernel, CONV5, &g5)?;
    let g4 = relu_backward(&fwd.z4, &b5.input)?;
    let b4 = conv2d_backward(batch, &w.conv4.kernel, CONV4, &g4)?;
    let grads = |b: crate::nn::Conv2dGrads| ConvLayer {
        kernel: b.kernel,
        bias: b.bias,
    };
    Ok(HeadGrads {
        input: b4.input.clone(),
        conv4: grads(b4),
        conv5: grads(b5),
        conv6: grads(b6),
    })
}

/// Mean loss over a labelled batch and its gradients.
pub fn batch_loss_grads(
    w: &HeadWeights,
    batch: &Tensor,
    labels: &[bool],
    kind: LossKind,
    params: &CsLossParams,
) -> Result<(f64, HeadGrads)> {
    let fwd = forward_cached(w, batch)?;
    if labels.len() != fwd.logits.len() {
        return Err(Error::shape(
            "batch_loss_grads",
            format!(
                "{} labels for a batch of {}",
                labels.len(),
                fwd.logits.len()
            ),
        ));
    }
    let inv = 1.0 / labels.len() as f64;
    let mut total = 0.0;
    let mut dl = Vec::with_capacity(labels.len());
    for (l, &y) in fwd.logits.iter().zip(labels) {
        let (v, g) = loss_on_logits(kind, *l, y, params);
        total += v;
        dl.push([g[0] * inv, g[1] * inv]);
    }
    let grads = head_backward(w, batch, &fwd, &dl)?;
    Ok((total * inv, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub iters: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_pos: usize,
    pub batch_neg: usize,
    pub loss: LossKind,
    pub loss_params: CsLossParams,
    pub train_conv4: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iters: 10,
            learning_rate: 0.0025,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_pos: 32,
            batch_neg: 96,
            loss: LossKind::Cs,
            loss_params: CsLossParams::default(),
            train_conv4: true,
        }
    }
}

fn draw<'a>(pool: &[&'a Tensor], n: usize, rng: &mut impl Rng) -> Vec<&'a Tensor> {
    if pool.len() >= n {
        sample_indices(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..n)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    }
}

/// SGD on random 32+96 mini-batches. Momentum starts from zero on every
/// call. Returns the mini-batch loss of each iteration.
pub fn finetune(
    w: &mut HeadWeights,
    pos: &[&Tensor],
    neg: &[&Tensor],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "finetune needs both classes, got {} positives and {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    let sgd = SgdConfig {
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    sgd.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zeros = |l: &ConvLayer| {
        (
            Tensor::zeros(l.kernel.shape()),
            Tensor::zeros(l.bias.shape()),
        )
    };
    let mut vel = [zeros(&w.conv4), zeros(&w.conv5), zeros(&w.conv6)];
    let labels: Vec<bool> = std::iter::repeat_n(true, cfg.batch_pos)
        .chain(std::iter::repeat_n(false, cfg.batch_neg))
        .collect();
    let mut curve = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let mut items = draw(pos, cfg.batch_pos, &mut rng);
        items.extend(draw(neg, cfg.batch_neg, &mut rng));
        let batch = Tensor::stack(&items)?;
        let (loss, g) = batch_loss_grads(w, &batch, &labels, cfg.loss, &cfg.loss_params)?;
        curve.push(loss);
        let [v4, v5, v6] = &mut vel;
        if cfg.train_conv4 {
            sgd_step(&mut w.conv4.kernel, &g.conv4.kernel, &mut v4.0, &sgd)?;
            sgd_step(&mut w.conv4.bias, &g.conv4.bias, &mut v4.1, &sgd)?;
        }
        sgd_step(&mut w.conv5.kernel, &g.conv5.kernel, &mut v5.0, &sgd)?;
        sgd_step(&mut w.conv5.bias, &g.conv5.bias, &mut v5.1, &sgd)?;
        sgd_step(&mut w.conv6.kernel, &g.conv6.kernel, &mut v6.0, &sgd)?;
        sgd_step(&mut w.conv6.bias, &g.conv6.bias, &mut v6.1, &sgd)?;
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("head weights after finetune"));
    }
    Ok(curve)
}

/// Fraction of samples whose target logit wins on the correct side.
pub fn accuracy(w: &HeadWeights, pos: &[Tensor], neg: &[Tensor]) -> Result<f64> {
    let sp = score_batch(w, pos)?;
    let sn = score_batch(w, neg)?;
    let hits =
        sp.iter().filter(|s| s.f_pos > 0.5).count() + sn.iter().filter(|s| s.f_pos < 0.5).count();
    debug_assert_eq!(TARGET, 1);
    Ok(hits as f64 / (pos.len() + neg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{numeric_grad, relative_error};

    fn toy(n: usize, k: usize, hot: usize, rng: &mut impl Rng) -> Vec<Tensor> {
        (0..n)
            .map(|_| {
                let mut t = Tensor::randn(&[k, 7, 7], 0.2, rng).map(f32::abs);
                t.data_mut()[hot * 49..(hot + 1) * 49]
                    .iter_mut()
                    .for_each(|v| *v += 1.0);
                t
            })
            .collect()
    }

    #[test]
    fn init_is_seeded_with_expected_spread() {
        assert_eq!(init_head(3, 8), init_head(3, 8));
        assert_ne!(init_head(3, 8), init_head(4, 8));
        let w = init_head(0, 420);
        let d = w.conv4.kernel.data();
        let mean = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d.len() as f64;
        assert!((var.sqrt() - 0.01).abs() < 0.002);
        assert!(w.conv4.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn shapes_and_zero_weights() {
        let w = HeadWeights::zeros(4, 8);
        let x = Tensor::full(&[4, 7, 7], 1.0);
        let s = head_forward(&x, &w).unwrap();
        assert_eq!(s.logits, [0.0, 0.0]);
        assert_eq!(s.f_pos, 0.5);
        assert!(head_forward(&Tensor::zeros(&[5, 7, 7]), &w).is_err());
        let fwd = forward_cached(&w, &x.reshape(&[1, 4, 7, 7]).unwrap()).unwrap();
        assert_eq!(fwd.z5.shape(), &[1, 8, 7, 7]);
    }

    #[test]
    fn doubling_last_layer_doubles_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = HeadWeights::random(6, 16, 2);
        w.conv6.bias = Tensor::randn(&[2], 0.1, &mut rng);
        let xs: Vec<Tensor> = (0..10)
            .map(|_| Tensor::randn(&[6, 7, 7], 1.0, &mut rng))
            .collect();
        let a = score_batch(&w, &xs).unwrap();
        let mut w2 = w.clone();
        w2.conv6.kernel.scale(2.0);
        w2.conv6.bias.scale(2.0);
        let b = score_batch(&w2, &xs).unwrap();
        for (s, t) in a.iter().zip(&b) {
            for c in 0..2 {
                assert!((t.logits[c] - 2.0 * s.logits[c]).abs() < 1e-6);
            }
            assert!((s.f_pos + s.f_neg - 1.0).abs() < 1e-12);
        }
        let argmax = |v: &[HeadScore]| {
            (0..v.len())
                .max_by(|&i, &j| v[i].f_pos.total_cmp(&v[j].f_pos))
                .unwrap()
        };
        assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = HeadWeights::random(3, 6, 8);
        let mut w = w;
        for l in [&mut w.conv4, &mut w.conv5, &mut w.conv6] {
            l.kernel.scale(30.0);
        }
        let x = Tensor::randn(&[2, 3, 7, 7], 1.0, &mut rng);
        let labels = [true, false];
        let p = CsLossParams::default();
        let (_, g) = batch_loss_grads(&w, &x, &labels, LossKind::Ce, &p).unwrap();
        let num = numeric_grad(
            |t| {
                batch_loss_grads(&w, t, &labels, LossKind::Ce, &p)
                    .unwrap()
                    .0
            },
            &x,
            1e-3,
        );
        assert!(relative_error(g.input.data(), num.data()) < 1e-2);
    }

    #[test]
    fn zero_rate_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pos = toy(5, 4, 0, &mut rng);
        let neg = toy(5, 4, 1, &mut rng);
        let w0 = HeadWeights::random(4, 8, 1);
        let mut w = w0.clone();
        let cfg = FinetuneConfig {
            learning_rate: 0.0,
            ..FinetuneConfig::default()
        };
        let pr: Vec<&Tensor> = pos.iter().collect();
        let nr: Vec<&Tensor> = neg.iter().collect();
        finetune(&mut w, &pr, &nr, &cfg, 0).unwrap();
        assert_eq!(w, w0);
        assert!(finetune(&mut w, &pr, &[], &cfg, 0).is_err());
    }

    #[test]
    fn frozen_conv4_stays_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pos = toy(40, 4, 0, &mut rng);
        let neg = toy(100, 4, 1, &mut rng);
        let pr: Vec<&Tensor> = pos.iter().collect();
        let nr: Vec<&Tensor> = neg.iter().collect();
        let w0 = HeadWeights::random(4, 16, 1);
        let mut w = w0.clone();
        let cfg = FinetuneConfig {
            train_conv4: false,
            ..FinetuneConfig::default()
        };
        finetune(&mut w, &pr, &nr, &cfg, 0).unwrap();
        assert_eq!(w.conv4, w0.conv4);
        assert_ne!(w.conv5, w0.conv5);
    }
}
