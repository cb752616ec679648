//! One-shot channel selection on the first frame.
//!
//! A single 3×3 convolution (Conv-DA, two output maps averaged to two
//! logits) is trained with cross-entropy on backbone RoI features. The
//! background logit (or the loss) is then back-propagated to each negative
//! candidate's input feature; the spatial mean of that gradient per channel
//! is the channel's importance, and the top-K channels by magnitude form
//! the frozen mask used by the tracking head.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{loss_on_logits, CsLossParams, LossKind, BACKGROUND};
use crate::nn::{conv2d, conv2d_backward, softmax_pair, Conv2dParams, Tensor};

const DA_PARAMS: Conv2dParams = Conv2dParams {
    stride: 1,
    dilation: 1,
    padding: (1, 1),
};

/// Conv-DA: `2 × C × 3 × 3` kernel and two biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvDaWeights {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvDaWeights {
    pub fn zeros(channels: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[2, channels, 3, 3]),
            bias: Tensor::zeros(&[2]),
        }
    }

    /// Gaussian kernel (std 0.01), zero bias.
    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            kernel: Tensor::randn(&[2, channels, 3, 3], 0.01, rng),
            bias: Tensor::zeros(&[2]),
        }
    }

    pub fn channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    /// `[background, target]` logits for each item of an `N×C×H×W` batch,
    /// via the full convolution.
    pub fn logits(&self, batch: &Tensor) -> Result<Vec<[f64; 2]>> {
        let y = conv2d(batch, &self.kernel, &self.bias, DA_PARAMS)?;
        let (n, _, h, w) = y.dims4("conv_da")?;
        let hw = h * w;
        Ok((0..n)
            .map(|i| {
                let mean = |c: usize| {
                    y.data()[(i * 2 + c) * hw..][..hw]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>()
                        / hw as f64
                };
                [mean(0), mean(1)]
            })
            .collect())
    }
}

/// Spatial mean of a padded 3×3 convolution is linear in the per-tap
/// window means, so each feature collapses to a `C×3×3` summary `S` with
/// `logit_c = Σ K[c]·S + b[c]`.
fn window_means(feature: &Tensor) -> Result<Vec<f32>> {
    let (c, h, w) = feature.dims3("conv_da window means")?;
    let hw = (h * w) as f64;
    let mut out = vec![0.0f32; c * 9];
    for ch in 0..c {
        let plane = &feature.data()[ch * h * w..][..h * w];
        for ki in 0..3usize {
            // rows y + ki − 1 for y in 0..h, clipped to the map
            let (r0, r1) = (ki.saturating_sub(1), (h + ki - 1).min(h));
            for kj in 0..3usize {
                let (c0, c1) = (kj.saturating_sub(1), (w + kj - 1).min(w));
                let mut s = 0.0f64;
                for r in r0..r1 {
                    s += plane[r * w + c0..r * w + c1]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
                out[ch * 9 + ki * 3 + kj] = (s / hw) as f32;
            }
        }
    }
    Ok(out)
}

fn summary_logits(da: &ConvDaWeights, s: &[f32]) -> [f64; 2] {
    let r = s.len();
    let k = da.kernel.data();
    std::array::from_fn(|c| {
        da.bias.data()[c] as f64
            + k[c * r..(c + 1) * r]
                .iter()
                .zip(s)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaTrainConfig {
    pub learning_rate: f32,
    pub iters: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_pos: usize,
    pub batch_neg: usize,
}

impl Default for DaTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            iters: 100,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_pos: 32,
            batch_neg: 96,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DaTraining {
    pub weights: ConvDaWeights,
    /// Mini-batch cross-entropy per iteration.
    pub loss_curve: Vec<f64>,
    /// Mean cross-entropy over the whole training set before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

fn draw(pool: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
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

/// Trains Conv-DA with plain cross-entropy on `C×H×W` RoI features.
pub fn train_conv_da(
    features: &[Tensor],
    labels: &[bool],
    cfg: &DaTrainConfig,
    seed: u64,
) -> Result<DaTraining> {
    if features.len() != labels.len() {
        return Err(Error::shape(
            "train_conv_da",
            format!("{} features vs {} labels", features.len(), labels.len()),
        ));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument(
            "domain adaptation needs at least one positive and one negative".into(),
        ));
    }
    let channels = features[0].dims3("train_conv_da")?.0;
    let summaries = features
        .iter()
        .map(window_means)
        .collect::<Result<Vec<_>>>()?;
    if summaries.iter().any(|s| s.len() != channels * 9) {
        return Err(Error::shape(
            "train_conv_da",
            "features differ in channel count",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut da = ConvDaWeights::random(channels, &mut rng);
    let params = CsLossParams::default();
    let set_loss = |da: &ConvDaWeights| -> (f64, f64) {
        let mut total = 0.0;
        let mut correct = 0usize;
        for (s, &y) in summaries.iter().zip(labels) {
            let l = summary_logits(da, s);
            total += loss_on_logits(LossKind::Ce, l, y, &params).0;
            correct += usize::from((l[1] > l[0]) == y);
        }
        (
            total / labels.len() as f64,
            correct as f64 / labels.len() as f64,
        )
    };
    let initial_loss = set_loss(&da).0;

    let r = channels * 9;
    let mut vel_k = vec![0.0f32; 2 * r];
    let mut vel_b = [0.0f32; 2];
    let mut loss_curve = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let mut batch = draw(&pos, cfg.batch_pos, &mut rng);
        batch.extend(draw(&neg, cfg.batch_neg, &mut rng));
        let inv = 1.0 / batch.len() as f64;
        let mut gk = vec![0.0f64; 2 * r];
        let mut gb = [0.0f64; 2];
        let mut total = 0.0;
        for &i in &batch {
            let s = &summaries[i];
            let (l, g) = loss_on_logits(LossKind::Ce, summary_logits(&da, s), labels[i], &params);
            total += l;
            for c in 0..2 {
                gb[c] += g[c] * inv;
                for (acc, &v) in gk[c * r..(c + 1) * r].iter_mut().zip(s) {
                    *acc += g[c] * inv * v as f64;
                }
            }
        }
        loss_curve.push(total * inv);
        let k = da.kernel.data_mut();
        for j in 0..2 * r {
            vel_k[j] = cfg.momentum * vel_k[j] + gk[j] as f32 + cfg.weight_decay * k[j];
            k[j] -= cfg.learning_rate * vel_k[j];
        }
        let b = da.bias.data_mut();
        for c in 0..2 {
            vel_b[c] = cfg.momentum * vel_b[c] + gb[c] as f32 + cfg.weight_decay * b[c];
            b[c] -= cfg.learning_rate * vel_b[c];
        }
    }
    let (final_loss, final_accuracy) = set_loss(&da);
    Ok(DaTraining {
        weights: da,
        loss_curve,
        initial_loss,
        final_loss,
        final_accuracy,
    })
}

/// Quantity differentiated for channel importance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceSource {
    /// The pre-softmax background logit.
    #[default]
    Score,
    /// Cross-entropy against the background label.
    Loss,
}

/// How importance values are ordered for selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ranking {
    #[default]
    Absolute,
    Signed,
}

/// Signed per-channel gradient means, averaged over negatives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelImportance {
    pub delta: Vec<f32>,
}

impl ChannelImportance {
    /// Values used for ranking: `|δ|` or `δ`.
    pub fn ranked_values(&self, ranking: Ranking) -> Vec<f32> {
        match ranking {
            Ranking::Absolute => self.delta.iter().map(|v| v.abs()).collect(),
            Ranking::Signed => self.delta.clone(),
        }
    }
}

const IMPORTANCE_CHUNK: usize = 64;

/// Back-propagates the background score (or loss) of each negative to its
/// input feature and averages the per-channel spatial means.
pub fn channel_importance(
    da: &ConvDaWeights,
    negatives: &[Tensor],
    source: ImportanceSource,
) -> Result<ChannelImportance> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument(
            "channel importance needs at least one negative".into(),
        ));
    }
    let (c, h, w) = negatives[0].dims3("channel_importance")?;
    if c != da.channels() {
        return Err(Error::shape(
            "channel_importance",
            format!("{c} feature channels vs Conv-DA with {}", da.channels()),
        ));
    }
    let hw = h * w;
    let mut acc = vec![0.0f64; c];
    for chunk in negatives.chunks(IMPORTANCE_CHUNK) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let batch = Tensor::stack(&refs)?;
        let upstream: Vec<[f64; 2]> = match source {
            ImportanceSource::Score => vec![[1.0, 0.0]; chunk.len()],
            ImportanceSource::Loss => da
                .logits(&batch)?
                .into_iter()
                .map(|l| {
                    // d(−ln p_bg)/dlogits = p − onehot(background)
                    let (p_bg, p_tg) = softmax_pair(l[0], l[1]);
                    [p_bg - 1.0, p_tg]
                })
                .collect(),
        };
        let mut grad_out = Tensor::zeros(&[chunk.len(), 2, h, w]);
        for (i, u) in upstream.iter().enumerate() {
            for (cls, &g) in u.iter().enumerate() {
                let v = (g / hw as f64) as f32;
                grad_out.data_mut()[(i * 2 + cls) * hw..][..hw].fill(v);
            }
        }
        let grads = conv2d_backward(&batch, &da.kernel, DA_PARAMS, &grad_out)?;
        for i in 0..chunk.len() {
            for (ch, a) in acc.iter_mut().enumerate() {
                let plane = &grads.input.data()[(i * c + ch) * hw..][..hw];
                *a += plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
            }
        }
    }
    let n = negatives.len() as f64;
    debug_assert_eq!(BACKGROUND, 0);
    Ok(ChannelImportance {
        delta: acc.into_iter().map(|v| (v / n) as f32).collect(),
    })
}

/// Ordered backbone channel indices kept for the tracking head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    indices: Vec<usize>,
}

impl ChannelMask {
    /// Validates strictly increasing indices below `channels`.
    pub fn new(indices: Vec<usize>, channels: usize) -> Result<Self> {
        if indices.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidArgument(
                "mask indices must be strictly increasing".into(),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= channels) {
            return Err(Error::InvalidArgument(format!(
                "mask index {bad} out of range for {channels} channels"
            )));
        }
        Ok(Self { indices })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            indices: (0..channels).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Indices of the `k` largest values (lower index wins ties), ascending.
pub fn select_channels(values: &[f32], k: usize) -> Result<ChannelMask> {
    if k > values.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot select {k} of {} channels",
            values.len()
        )));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    ChannelMask::new(chosen, values.len())
}

/// Gathers the masked channels of a `C×H×W` feature, in mask order.
pub fn apply_mask(feature: &Tensor, mask: &ChannelMask) -> Result<Tensor> {
    let (c, h, w) = feature.dims3("apply_mask")?;
    let plane = h * w;
    let mut data = Vec::with_capacity(mask.len() * plane);
    for &i in mask.indices() {
        if i >= c {
            return Err(Error::InvalidArgument(format!(
                "mask index {i} out of range for {c} channels"
            )));
        }
        data.extend_from_slice(&feature.data()[i * plane..][..plane]);
    }
    Ok(Tensor::from_parts(vec![mask.len(), h, w], data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub train: DaTrainConfig,
    pub mask_k: usize,
    pub importance_source: ImportanceSource,
    pub ranking: Ranking,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            train: DaTrainConfig::default(),
            mask_k: 420,
            importance_source: ImportanceSource::Score,
            ranking: Ranking::Absolute,
        }
    }
}

/// Everything the frame-1 adaptation produced.
#[derive(Clone, Debug)]
pub struct Adaptation {
    pub training: DaTraining,
    pub importance: ChannelImportance,
    pub mask: ChannelMask,
}

/// Trains Conv-DA, scores channels on the negatives and keeps the top K.
pub fn adapt_channels(
    positives: &[Tensor],
    negatives: &[Tensor],
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<Adaptation> {
    let features: Vec<Tensor> = positives.iter().chain(negatives).cloned().collect();
    let labels: Vec<bool> = std::iter::repeat_n(true, positives.len())
        .chain(std::iter::repeat_n(false, negatives.len()))
        .collect();
    let training = train_conv_da(&features, &labels, &cfg.train, seed)?;
    let importance = channel_importance(&training.weights, negatives, cfg.importance_source)?;
    let mask = select_channels(&importance.ranked_values(cfg.ranking), cfg.mask_k)?;
    Ok(Adaptation {
        training,
        importance,
        mask,
    })
}
