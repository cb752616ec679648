//! Adaptive RoIAlign over the shared conv3 feature map.

use super::features::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::sampling::BBox;

/// Default pooled resolution per axis.
pub const ROI_OUTPUT: usize = 7;

/// Maximum bilinear samples per bin axis.
const MAX_SAMPLES: usize = 4;

/// One bilinear tap: output bin, flat spatial index into a channel plane,
/// and weight (already divided by the bin's sample count).
#[derive(Clone, Copy, Debug)]
struct Tap {
    bin: usize,
    index: usize,
    weight: f32,
}

fn axis_samples(len: f64, out: usize) -> (f64, usize) {
    let bin = len / out as f64;
    let n = (bin.ceil() as usize).clamp(1, MAX_SAMPLES);
    (bin, n)
}

/// Bilinear corner indices and weights along one axis, or `None` when the
/// sample lies more than one cell outside the map.
fn bilinear_axis(v: f64, size: usize) -> Option<[(usize, f64); 2]> {
    if v < -1.0 || v > size as f64 {
        return None;
    }
    let v = v.max(0.0);
    let mut lo = v.floor() as usize;
    let (hi, frac) = if lo >= size - 1 {
        lo = size - 1;
        (size - 1, 0.0)
    } else {
        (lo + 1, v - lo as f64)
    };
    Some([(lo, 1.0 - frac), (hi, frac)])
}

fn taps(fm: &FeatureMap, roi: &BBox, out: usize) -> Result<Vec<Tap>> {
    if !roi.is_valid() {
        return Err(Error::InvalidArgument(format!("degenerate RoI {roi:?}")));
    }
    if out == 0 {
        return Err(Error::InvalidArgument(
            "RoI output size must be positive".into(),
        ));
    }
    let g = fm.geometry;
    let (h, w) = (fm.height(), fm.width());
    let x0 = (roi.x - g.offset) / g.stride;
    let y0 = (roi.y - g.offset) / g.stride;
    let rw = roi.w / g.stride;
    let rh = roi.h / g.stride;
    let (bw, nx) = axis_samples(rw, out);
    let (bh, ny) = axis_samples(rh, out);
    let inv = 1.0 / (nx * ny) as f64;
    let mut taps = Vec::with_capacity(out * out * nx * ny * 4);
    for by in 0..out {
        for sy in 0..ny {
            let yv = y0 + by as f64 * bh + (sy as f64 + 0.5) * bh / ny as f64;
            let Some(ys) = bilinear_axis(yv, h) else {
                continue;
            };
            for bx in 0..out {
                for sx in 0..nx {
                    let xv = x0 + bx as f64 * bw + (sx as f64 + 0.5) * bw / nx as f64;
                    let Some(xs) = bilinear_axis(xv, w) else {
                        continue;
                    };
                    for &(yi, wy) in &ys {
                        for &(xi, wx) in &xs {
                            let weight = wy * wx * inv;
                            if weight != 0.0 {
                                taps.push(Tap {
                                    bin: by * out + bx,
                                    index: yi * w + xi,
                                    weight: weight as f32,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(taps)
}

/// Pools the listed channels of `roi` (given in preprocessed-frame pixels)
/// to `channels.len() × out × out`.
pub fn roi_align_channels(
    fm: &FeatureMap,
    roi: &BBox,
    out: usize,
    channels: &[usize],
) -> Result<Tensor> {
    let c = fm.channels();
    if let Some(&bad) = channels.iter().find(|&&ch| ch >= c) {
        return Err(Error::InvalidArgument(format!(
            "channel {bad} out of range for {c} channels"
        )));
    }
    let taps = taps(fm, roi, out)?;
    let plane = fm.height() * fm.width();
    let bins = out * out;
    let mut data = vec![0.0f32; channels.len() * bins];
    for (k, &ch) in channels.iter().enumerate() {
        let src = &fm.tensor.data()[ch * plane..][..plane];
        let dst = &mut data[k * bins..][..bins];
        for t in &taps {
            dst[t.bin] += t.weight * src[t.index];
        }
    }
    Ok(Tensor::from_parts(vec![channels.len(), out, out], data))
}

/// Pools every channel of `roi` to `C × out × out`.
pub fn roi_align(fm: &FeatureMap, roi: &BBox, out: usize) -> Result<Tensor> {
    let all: Vec<usize> = (0..fm.channels()).collect();
    roi_align_channels(fm, roi, out, &all)
}

/// Scatters the pooled-output gradient back onto the feature map.
pub fn roi_align_backward(fm: &FeatureMap, roi: &BBox, grad_out: &Tensor) -> Result<Tensor> {
    let [c, out, out2] = grad_out.shape()[..] else {
        return Err(Error::shape(
            "roi_align_backward",
            format!("expected CxSxS gradient, got {:?}", grad_out.shape()),
        ));
    };
    if c != fm.channels() || out != out2 {
        return Err(Error::shape(
            "roi_align_backward",
            format!(
                "gradient {:?} vs {} channels",
                grad_out.shape(),
                fm.channels()
            ),
        ));
    }
    let taps = taps(fm, roi, out)?;
    let plane = fm.height() * fm.width();
    let bins = out * out;
    let mut grad = Tensor::zeros(fm.tensor.shape());
    for ch in 0..c {
        let g = &grad_out.data()[ch * bins..][..bins];
        let dst = &mut grad.data_mut()[ch * plane..][..plane];
        for t in &taps {
            dst[t.index] += t.weight * g[t.bin];
        }
    }
    Ok(grad)
}
