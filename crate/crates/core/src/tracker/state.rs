use std::sync::Arc;

use image::RgbImage;
use rayon::prelude::*;

use super::config::TrackerConfig;
use super::memory::{MemoryStore, Schedule, UpdateKind};
use super::regressor::{apply_regressor, train_box_regressor, BoxRegressor};
use crate::adapt::{adapt_channels, Adaptation, ChannelMask};
use crate::backbone::{
    frame_features, resize_bilinear, roi_align_channels, target_scale, BackboneWeights, FeatureMap,
    ROI_OUTPUT, TARGET_SIDE,
};
use crate::error::{Error, Result};
use crate::head::{finetune, head_forward, score_batch, HeadWeights};
use crate::nn::Tensor;
use crate::sampling::{
    draw_regression_set, draw_training_sets, sample_candidates, BBox, FrameSize, Phase,
    MIN_BOX_SIDE,
};

/// Per-frame output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameResult {
    /// 1-based frame index.
    pub frame: usize,
    /// Original-image coordinates.
    pub bbox: BBox,
    /// Positive-class probability of the chosen candidate.
    pub score: f64,
    pub success: bool,
    pub update: UpdateKind,
}

/// Independent stream per (frame, purpose).
fn derive_seed(base: u64, frame: usize, stream: u64) -> u64 {
    let mut z = base
        ^ (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_DA_SAMPLES: u64 = 1;
const STREAM_DA_TRAIN: u64 = 2;
const STREAM_FIRST_SAMPLES: u64 = 3;
const STREAM_HEAD_INIT: u64 = 4;
const STREAM_FINETUNE: u64 = 5;
const STREAM_REGRESSION: u64 = 6;
const STREAM_CANDIDATES: u64 = 7;
const STREAM_COLLECT: u64 = 8;

type FeatureMemory = MemoryStore<Vec<Tensor>, Vec<Tensor>>;

/// One sequence's tracking state.
pub struct Tracker {
    cfg: TrackerConfig,
    backbone: Arc<BackboneWeights>,
    frame_size: FrameSize,
    scale: f64,
    head: HeadWeights,
    adaptation: Adaptation,
    first_frame_curve: Vec<f64>,
    regressor: BoxRegressor,
    memory: FeatureMemory,
    schedule: Schedule,
    last_box: BBox,
    t: usize,
}

fn check_frame(frame: &RgbImage) -> Result<FrameSize> {
    if frame.width() == 0 || frame.height() == 0 {
        return Err(Error::Tracking("empty frame".into()));
    }
    Ok(FrameSize::new(frame.width(), frame.height()))
}

impl Tracker {
    /// Channel selection, first-frame head training, regressor fitting and
    /// memory seeding on frame 1. Returns the tracker and frame 1's result
    /// (the ground-truth box itself).
    pub fn init(
        frame: &RgbImage,
        gt: BBox,
        cfg: TrackerConfig,
        backbone: Arc<BackboneWeights>,
    ) -> Result<(Self, FrameResult)> {
        cfg.validate()?;
        let frame_size = check_frame(frame)?;
        if !gt.is_valid() {
            return Err(Error::InvalidArgument(format!(
                "degenerate initial box {gt:?}"
            )));
        }
        if gt.intersection_area(&BBox::new(0.0, 0.0, frame_size.width, frame_size.height)) <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "initial box {gt:?} lies outside the {}×{} frame",
                frame_size.width, frame_size.height
            )));
        }
        let channels = backbone.arch().out_channels();
        if cfg.mask_k > channels {
            return Err(Error::InvalidArgument(format!(
                "mask_k {} exceeds the backbone's {channels} channels",
                cfg.mask_k
            )));
        }
        let scale = target_scale(&gt, TARGET_SIDE)?;
        let fm = frame_features(&resize_bilinear(frame, scale), &backbone)?;
        let seed = |s| derive_seed(cfg.seed, 1, s);

        let all: Vec<usize> = (0..channels).collect();
        let da = draw_training_sets(&gt, Phase::DomainAdapt, frame_size, seed(STREAM_DA_SAMPLES))?;
        let da_pos = roi_features(&fm, &da.positives, scale, &all)?;
        let da_neg = roi_features(&fm, &da.negatives, scale, &all)?;
        let adaptation = adapt_channels(&da_pos, &da_neg, &cfg.adapt(), seed(STREAM_DA_TRAIN))?;
        let mask = adaptation.mask.indices();

        let sets = draw_training_sets(
            &gt,
            Phase::FirstFrame,
            frame_size,
            seed(STREAM_FIRST_SAMPLES),
        )?;
        let pos = roi_features(&fm, &sets.positives, scale, mask)?;
        let neg = roi_features(&fm, &sets.negatives, scale, mask)?;
        let mut head = HeadWeights::random(cfg.mask_k, cfg.head_hidden, seed(STREAM_HEAD_INIT));
        let first_frame_curve = finetune(
            &mut head,
            &pos.iter().collect::<Vec<_>>(),
            &neg.iter().collect::<Vec<_>>(),
            &cfg.finetune(cfg.first_frame_iters, cfg.first_frame_lr),
            seed(STREAM_FINETUNE),
        )?;

        let regressor = if cfg.bbox_regression {
            let boxes = draw_regression_set(
                &gt,
                cfg.regression_samples,
                frame_size,
                seed(STREAM_REGRESSION),
            )?;
            let feats = roi_features(&fm, &boxes, scale, mask)?;
            train_box_regressor(&feats, &boxes, &gt, cfg.ridge_lambda)?
        } else {
            BoxRegressor::zeros(cfg.mask_k * ROI_OUTPUT * ROI_OUTPUT)
        };

        let online = Phase::Online.quota();
        let mut memory = MemoryStore::new(cfg.tau_short, cfg.tau_long)?;
        let keep = |v: Vec<Tensor>, n: usize| v.into_iter().take(n).collect::<Vec<_>>();
        memory.push(1, keep(pos, online.positives), keep(neg, online.negatives));

        let gt_feature = roi_features(&fm, &[gt], scale, mask)?.remove(0);
        let score = head_forward(&gt_feature, &head)?.f_pos;
        let schedule = Schedule {
            tau_int: cfg.tau_int,
            threshold: cfg.score_threshold,
        };
        let tracker = Self {
            cfg,
            backbone,
            frame_size,
            scale,
            head,
            adaptation,
            first_frame_curve,
            regressor,
            memory,
            schedule,
            last_box: gt,
            t: 1,
        };
        let result = FrameResult {
            frame: 1,
            bbox: gt,
            score,
            success: true,
            update: UpdateKind::None,
        };
        Ok((tracker, result))
    }

    /// Locates the target in the next frame and runs the update schedule.
    pub fn step(&mut self, frame: &RgbImage) -> Result<FrameResult> {
        let size = check_frame(frame)?;
        if size != self.frame_size {
            return Err(Error::Tracking(format!(
                "frame size {}×{} differs from the first frame's {}×{}",
                size.width, size.height, self.frame_size.width, self.frame_size.height
            )));
        }
        self.t += 1;
        let t = self.t;
        let seed = |s| derive_seed(self.cfg.seed, t, s);
        let fm = frame_features(&resize_bilinear(frame, self.scale), &self.backbone)?;
        let candidates = sample_candidates(
            &self.last_box,
            self.cfg.candidates_per_frame,
            &self.cfg.sampler,
            Some(self.frame_size),
            seed(STREAM_CANDIDATES),
        );
        let mask = self.adaptation.mask.indices().to_vec();
        let feats = roi_features(&fm, &candidates, self.scale, &mask)?;
        let scores = score_batch(&self.head, &feats)?;
        let best = argmax(scores.iter().map(|s| s.f_pos))
            .ok_or_else(|| Error::Tracking("no candidates to score".into()))?;
        let score = scores[best].f_pos;
        let mut bbox = candidates[best];
        let frame_size = self.frame_size;
        let (cfg, regressor, scale) = (&self.cfg, &self.regressor, self.scale);
        let decision = self.memory.record(&self.schedule, t, score, || {
            if cfg.bbox_regression {
                bbox = apply_regressor(regressor, &feats[best], &bbox)?.clipped_to_frame(
                    frame_size.width,
                    frame_size.height,
                    MIN_BOX_SIDE,
                );
            }
            let sets = draw_training_sets(&bbox, Phase::Online, frame_size, seed(STREAM_COLLECT))?;
            let pos = roi_features(&fm, &sets.positives, scale, &mask)?;
            let neg = roi_features(&fm, &sets.negatives, scale, &mask)?;
            Ok((pos, neg))
        })?;
        if let Some((pos, neg)) = self.memory.training_set(decision.update) {
            let pos: Vec<&Tensor> = pos.into_iter().flatten().collect();
            let neg: Vec<&Tensor> = neg.into_iter().flatten().collect();
            finetune(
                &mut self.head,
                &pos,
                &neg,
                &self.cfg.finetune(self.cfg.online_iters, self.cfg.online_lr),
                seed(STREAM_FINETUNE),
            )?;
        }
        self.last_box = bbox;
        Ok(FrameResult {
            frame: t,
            bbox,
            score,
            success: decision.success,
            update: decision.update,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn head(&self) -> &HeadWeights {
        &self.head
    }

    pub fn mask(&self) -> &ChannelMask {
        &self.adaptation.mask
    }

    pub fn adaptation(&self) -> &Adaptation {
        &self.adaptation
    }

    pub fn first_frame_curve(&self) -> &[f64] {
        &self.first_frame_curve
    }

    pub fn regressor(&self) -> &BoxRegressor {
        &self.regressor
    }

    pub fn short_memory(&self) -> Vec<usize> {
        self.memory.short_frames()
    }

    pub fn long_memory(&self) -> Vec<usize> {
        self.memory.long_frames()
    }

    /// Index of the last processed frame (1-based).
    pub fn frame_index(&self) -> usize {
        self.t
    }

    /// Preprocessing scale fixed on frame 1.
    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// First index of the maximum; `None` for an empty input.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Masked RoI features of original-image boxes.
pub fn roi_features(
    fm: &FeatureMap,
    boxes: &[BBox],
    scale: f64,
    channels: &[usize],
) -> Result<Vec<Tensor>> {
    boxes
        .par_iter()
        .map(|b| roi_align_channels(fm, &b.scaled(scale), ROI_OUTPUT, channels))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax([0.1, 0.9, 0.3]), Some(1));
        assert_eq!(argmax([0.4, 0.7, 0.7]), Some(1));
        assert_eq!(argmax(std::iter::empty()), None);
    }

    #[test]
    fn seeds_differ_by_frame_and_stream() {
        assert_ne!(derive_seed(0, 1, 1), derive_seed(0, 2, 1));
        assert_ne!(derive_seed(0, 1, 1), derive_seed(0, 1, 2));
        assert_eq!(derive_seed(5, 3, 7), derive_seed(5, 3, 7));
    }
}
