use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, DaTrainConfig, ImportanceSource, Ranking};
use crate::error::{Error, Result};
use crate::head::{FinetuneConfig, HEAD_HIDDEN};
use crate::loss::{CsLossParams, LossKind};
use crate::sampling::SamplerCfg;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub tau_short: usize,
    pub tau_long: usize,
    pub tau_int: usize,
    pub score_threshold: f64,
    pub first_frame_iters: usize,
    pub first_frame_lr: f32,
    pub online_iters: usize,
    pub online_lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub loss: LossKind,
    pub loss_params: CsLossParams,
    pub sampler: SamplerCfg,
    pub candidates_per_frame: usize,
    pub mask_k: usize,
    pub head_hidden: usize,
    pub domain_adapt: DaTrainConfig,
    pub importance_source: ImportanceSource,
    pub ranking: Ranking,
    pub regression_samples: usize,
    pub ridge_lambda: f64,
    pub bbox_regression: bool,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            tau_short: 20,
            tau_long: 100,
            tau_int: 10,
            score_threshold: 0.5,
            first_frame_iters: 50,
            first_frame_lr: 0.0015,
            online_iters: 10,
            online_lr: 0.0025,
            momentum: 0.9,
            weight_decay: 5e-4,
            loss: LossKind::Cs,
            loss_params: CsLossParams::default(),
            sampler: SamplerCfg::default(),
            candidates_per_frame: 256,
            mask_k: 420,
            head_hidden: HEAD_HIDDEN,
            domain_adapt: DaTrainConfig::default(),
            importance_source: ImportanceSource::Score,
            ranking: Ranking::Absolute,
            regression_samples: 1000,
            ridge_lambda: 1000.0,
            bbox_regression: true,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    /// Sizes matched to the toy backbone (128 output channels): a quarter
    /// of the channels kept and a 64-wide head.
    pub fn toy() -> Self {
        Self {
            mask_k: 105,
            head_hidden: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.tau_short == 0 || self.tau_short > self.tau_long {
            return bad(format!(
                "need 0 < tau_short ≤ tau_long, got {} and {}",
                self.tau_short, self.tau_long
            ));
        }
        if self.tau_int == 0 {
            return bad("tau_int must be positive".into());
        }
        if self.first_frame_iters == 0 || self.online_iters == 0 {
            return bad("iteration counts must be positive".into());
        }
        if !(self.first_frame_lr > 0.0 && self.online_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return bad(format!(
                "score threshold {} outside [0, 1]",
                self.score_threshold
            ));
        }
        if self.candidates_per_frame == 0 || self.mask_k == 0 || self.head_hidden == 0 {
            return bad("candidate count, mask size and head width must be positive".into());
        }
        if self.ridge_lambda.is_nan() || self.ridge_lambda <= 0.0 {
            return bad(format!(
                "ridge lambda must be positive, got {}",
                self.ridge_lambda
            ));
        }
        self.loss_params.validate()?;
        self.sampler.validate()
    }

    pub(crate) fn adapt(&self) -> AdaptConfig {
        AdaptConfig {
            train: self.domain_adapt.clone(),
            mask_k: self.mask_k,
            importance_source: self.importance_source,
            ranking: self.ranking,
        }
    }

    pub(crate) fn finetune(&self, iters: usize, lr: f32) -> FinetuneConfig {
        FinetuneConfig {
            iters,
            learning_rate: lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            loss: self.loss,
            loss_params: self.loss_params,
            train_conv4: true,
            ..FinetuneConfig::default()
        }
    }
}
