//! Frozen conv1..conv3 feature extractor, frame preprocessing, and RoI
//! pooling over the per-frame shared feature map.

pub mod cwb;
mod features;
mod preprocess;
mod roi;
mod weights;

pub use features::{
    compose_geometry, extract_features, min_input_side, FeatureGeometry, FeatureMap,
    LayerFootprint, LAYER_CHAIN,
};
pub use preprocess::{
    image_to_tensor, preprocess_frame, resize_bilinear, target_scale, CHANNEL_MEANS, TARGET_SIDE,
};
pub use roi::{roi_align, roi_align_backward, roi_align_channels, ROI_OUTPUT};
pub use weights::{load_cwb, BackboneArch, BackboneWeights, ConvLayer};

use image::RgbImage;

use crate::error::Result;

/// Converts an already scaled frame and runs the extractor on it.
pub fn frame_features(scaled: &RgbImage, weights: &BackboneWeights) -> Result<FeatureMap> {
    extract_features(&image_to_tensor(scaled, min_input_side()), weights)
}
