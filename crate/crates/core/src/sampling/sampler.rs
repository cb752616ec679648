use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::bbox::{iou, BBox};
use crate::error::{Error, Result};

/// Frame extents in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameSize {
    pub width: f64,
    pub height: f64,
}

impl FrameSize {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width: width as f64,
            height: height as f64,
        }
    }
}

/// Smallest side a clipped candidate may shrink to.
pub const MIN_BOX_SIDE: f64 = 10.0;

/// Gaussian candidate distribution around the previous target state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerCfg {
    /// Translation std as a multiple of `mean(w, h)`.
    pub trans_sigma_factor: f64,
    /// Std of the scale exponent `s`; the scale multiplier is `scale_base^s`.
    pub scale_sigma: f64,
    pub scale_base: f64,
    pub clip_to_frame: bool,
}

impl Default for SamplerCfg {
    fn default() -> Self {
        Self {
            trans_sigma_factor: 0.6,
            scale_sigma: 0.5,
            scale_base: 1.05,
            clip_to_frame: true,
        }
    }
}

impl SamplerCfg {
    pub fn validate(&self) -> Result<()> {
        if self.trans_sigma_factor >= 0.0 && self.scale_sigma >= 0.0 && self.scale_base > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid sampler config {self:?}"
            )))
        }
    }
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("finite non-negative std")
}

fn gaussian_box(
    center: &BBox,
    trans: f64,
    base: f64,
    scale_sigma: f64,
    rng: &mut impl Rng,
) -> BBox {
    let (cx, cy) = center.center();
    let t = normal(trans * 0.5 * (center.w + center.h));
    let s = base.powf(normal(scale_sigma).sample(rng));
    let dx = t.sample(rng);
    let dy = t.sample(rng);
    BBox::from_center(cx + dx, cy + dy, center.w * s, center.h * s)
}

fn finish(b: BBox, frame: Option<FrameSize>) -> BBox {
    match frame {
        Some(f) => b.clipped_to_frame(f.width, f.height, MIN_BOX_SIDE),
        None => b,
    }
}

/// Draws `n` candidates from the Gaussian in `cfg`, deterministically in
/// `seed`. Clipping applies only when `cfg.clip_to_frame` and a frame size
/// is given.
pub fn sample_candidates(
    center: &BBox,
    n: usize,
    cfg: &SamplerCfg,
    frame: Option<FrameSize>,
    seed: u64,
) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = frame.filter(|_| cfg.clip_to_frame);
    (0..n)
        .map(|_| {
            let b = gaussian_box(
                center,
                cfg.trans_sigma_factor,
                cfg.scale_base,
                cfg.scale_sigma,
                &mut rng,
            );
            finish(b, frame)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledCandidates {
    pub positives: Vec<BBox>,
    pub negatives: Vec<BBox>,
}

/// IoU above `pos_thr` is positive, below `neg_thr` negative, anything in
/// between is dropped.
pub fn label_candidates(
    cands: &[BBox],
    gt: &BBox,
    pos_thr: f64,
    neg_thr: f64,
) -> Result<LabeledCandidates> {
    if pos_thr <= neg_thr {
        return Err(Error::InvalidArgument(format!(
            "positive threshold {pos_thr} must exceed negative threshold {neg_thr}"
        )));
    }
    let mut out = LabeledCandidates::default();
    for c in cands {
        let o = iou(c, gt);
        if o > pos_thr {
            out.positives.push(*c);
        } else if o < neg_thr {
            out.negatives.push(*c);
        }
    }
    Ok(out)
}

/// Which training set to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// 500 positives (IoU > 0.7) and 5000 negatives (IoU < 0.5).
    FirstFrame,
    /// 50 positives (IoU > 0.7) and 200 negatives (IoU < 0.3).
    Online,
    /// 250 positives and 250 negatives drawn over a wider radius.
    DomainAdapt,
}

#[derive(Clone, Copy, Debug)]
pub struct PhaseQuota {
    pub positives: usize,
    pub negatives: usize,
    pub pos_thr: f64,
    pub neg_thr: f64,
}

impl Phase {
    pub fn quota(self) -> PhaseQuota {
        match self {
            Phase::FirstFrame => PhaseQuota {
                positives: 500,
                negatives: 5000,
                pos_thr: 0.7,
                neg_thr: 0.5,
            },
            Phase::Online => PhaseQuota {
                positives: 50,
                negatives: 200,
                pos_thr: 0.7,
                neg_thr: 0.3,
            },
            Phase::DomainAdapt => PhaseQuota {
                positives: 250,
                negatives: 250,
                pos_thr: 0.7,
                neg_thr: 0.5,
            },
        }
    }
}

/// Positive proposals: tight Gaussian around the target.
const POS_TRANS: f64 = 0.1;
const POS_SCALE_BASE: f64 = 1.3;
/// Negative proposals: uniform offsets within this many mean sides.
const NEG_TRANS_FIRST: f64 = 1.0;
const NEG_TRANS_ONLINE: f64 = 1.5;
const NEG_SCALE_BASE: f64 = 1.3;
/// Domain-adaptation negatives: twice the inference translation std, with
/// this fraction drawn uniformly over the whole frame.
const DA_WHOLE_FRAME_FRACTION: f64 = 0.2;

fn uniform_box(center: &BBox, trans: f64, scale_base: f64, rng: &mut impl Rng) -> BBox {
    let (cx, cy) = center.center();
    let r = trans * 0.5 * (center.w + center.h);
    let dx = rng.random_range(-r..=r);
    let dy = rng.random_range(-r..=r);
    let s = scale_base.powf(rng.random_range(-1.0..=1.0));
    BBox::from_center(cx + dx, cy + dy, center.w * s, center.h * s)
}

fn whole_frame_box(center: &BBox, frame: FrameSize, scale_base: f64, rng: &mut impl Rng) -> BBox {
    let cx = rng.random_range(0.0..=frame.width);
    let cy = rng.random_range(0.0..=frame.height);
    let s = scale_base.powf(rng.random_range(-1.0..=1.0));
    BBox::from_center(cx, cy, center.w * s, center.h * s)
}

fn fill(
    quota: usize,
    mut propose: impl FnMut() -> BBox,
    accept: impl Fn(&BBox) -> bool,
    what: &str,
) -> Result<Vec<BBox>> {
    let max_attempts = 200 * quota + 1000;
    let mut out = Vec::with_capacity(quota);
    for _ in 0..max_attempts {
        if out.len() == quota {
            break;
        }
        let b = propose();
        if accept(&b) {
            out.push(b);
        }
    }
    if out.len() < quota {
        return Err(Error::SamplingExhausted(format!(
            "only {} of {quota} {what} after {max_attempts} attempts",
            out.len()
        )));
    }
    Ok(out)
}

/// Rejection-samples the positive and negative quotas of `phase` around
/// `gt`, clipped to the frame.
pub fn draw_training_sets(
    gt: &BBox,
    phase: Phase,
    frame: FrameSize,
    seed: u64,
) -> Result<LabeledCandidates> {
    if !gt.is_valid() {
        return Err(Error::InvalidArgument(format!("degenerate box {gt:?}")));
    }
    let q = phase.quota();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = |b: BBox| finish(b, Some(frame));
    let positives = fill(
        q.positives,
        || clip(gaussian_box(gt, POS_TRANS, POS_SCALE_BASE, 0.5, &mut rng)),
        |b| iou(b, gt) > q.pos_thr,
        "positives",
    )?;
    let neg_ok = |b: &BBox| iou(b, gt) < q.neg_thr;
    let negatives = match phase {
        Phase::FirstFrame => {
            let mut k = 0usize;
            fill(
                q.negatives,
                || {
                    k += 1;
                    if k.is_multiple_of(2) {
                        clip(whole_frame_box(gt, frame, NEG_SCALE_BASE, &mut rng))
                    } else {
                        clip(uniform_box(gt, NEG_TRANS_FIRST, NEG_SCALE_BASE, &mut rng))
                    }
                },
                neg_ok,
                "negatives",
            )?
        }
        Phase::Online => fill(
            q.negatives,
            || clip(uniform_box(gt, NEG_TRANS_ONLINE, NEG_SCALE_BASE, &mut rng)),
            neg_ok,
            "negatives",
        )?,
        Phase::DomainAdapt => {
            let inference = SamplerCfg::default();
            fill(
                q.negatives,
                || {
                    if rng.random_bool(DA_WHOLE_FRAME_FRACTION) {
                        clip(whole_frame_box(gt, frame, inference.scale_base, &mut rng))
                    } else {
                        clip(gaussian_box(
                            gt,
                            2.0 * inference.trans_sigma_factor,
                            inference.scale_base,
                            inference.scale_sigma,
                            &mut rng,
                        ))
                    }
                },
                neg_ok,
                "negatives",
            )?
        }
    };
    Ok(LabeledCandidates {
        positives,
        negatives,
    })
}

/// Candidates for fitting the box regressor: IoU > 0.6 with `gt`, with
/// independent width/height jitter so extents vary.
pub fn draw_regression_set(gt: &BBox, n: usize, frame: FrameSize, seed: u64) -> Result<Vec<BBox>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cx, cy) = gt.center();
    let t = normal(0.3 * 0.5 * (gt.w + gt.h));
    let s = normal(0.5);
    fill(
        n,
        || {
            let sw = 1.6f64.powf(s.sample(&mut rng)) * 1.1f64.powf(s.sample(&mut rng));
            let sh = sw * 1.1f64.powf(s.sample(&mut rng));
            let b = BBox::from_center(
                cx + t.sample(&mut rng),
                cy + t.sample(&mut rng),
                gt.w * sw,
                gt.h * sh,
            );
            finish(b, Some(frame))
        },
        |b| iou(b, gt) > 0.6,
        "regression candidates",
    )
}
