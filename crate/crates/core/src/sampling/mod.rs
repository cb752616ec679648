//! Candidate boxes: IoU geometry, Gaussian proposals around the previous
//! target, and labelled training sets.

mod bbox;
mod sampler;

pub use bbox::{iou, BBox};
pub use sampler::{
    draw_regression_set, draw_training_sets, label_candidates, sample_candidates, FrameSize,
    LabeledCandidates, Phase, PhaseQuota, SamplerCfg, MIN_BOX_SIDE,
};
