use image::RgbImage;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::sampling::BBox;

/// Side length the target is normalized to.
pub const TARGET_SIDE: f64 = 107.0;

/// Per-channel RGB means subtracted before the first convolution.
pub const CHANNEL_MEANS: [f32; 3] = [123.68, 116.78, 103.94];

/// Scale factor that brings the target's geometric-mean side to
/// `target_side`.
pub fn target_scale(target: &BBox, target_side: f64) -> Result<f64> {
    if !target.is_valid() {
        return Err(Error::InvalidArgument(format!(
            "degenerate target box {target:?}"
        )));
    }
    Ok(target_side / (target.w * target.h).sqrt())
}

/// Bilinear resize by `scale` (pixel-centre aligned). A unit scale returns
/// the image unchanged.
pub fn resize_bilinear(image: &RgbImage, scale: f64) -> RgbImage {
    let (w, h) = image.dimensions();
    let ow = ((w as f64 * scale).round() as u32).max(1);
    let oh = ((h as f64 * scale).round() as u32).max(1);
    if ow == w && oh == h {
        return image.clone();
    }
    let sx = w as f64 / ow as f64;
    let sy = h as f64 / oh as f64;
    let axis = |dst: u32, s: f64, n: u32| -> (u32, u32, f64) {
        let src = ((dst as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = src.floor() as u32;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, src - lo as f64)
    };
    let cols: Vec<_> = (0..ow).map(|x| axis(x, sx, w)).collect();
    let mut out = RgbImage::new(ow, oh);
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, sy, h);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let p00 = image.get_pixel(x0, y0).0;
            let p01 = image.get_pixel(x1, y0).0;
            let p10 = image.get_pixel(x0, y1).0;
            let p11 = image.get_pixel(x1, y1).0;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                let bot = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                px[c] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x as u32, y, image::Rgb(px));
        }
    }
    out
}

/// Resizes the whole frame so the target becomes `target_side` on its
/// geometric-mean side. Returns the resized frame and the scale mapping
/// original to preprocessed coordinates.
pub fn preprocess_frame(
    image: &RgbImage,
    target: &BBox,
    target_side: f64,
) -> Result<(RgbImage, f64)> {
    let scale = target_scale(target, target_side)?;
    Ok((resize_bilinear(image, scale), scale))
}

/// Converts to a mean-subtracted `1×3×H×W` tensor, edge-padding right and
/// bottom up to `min_side`.
pub fn image_to_tensor(image: &RgbImage, min_side: usize) -> Tensor {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let tw = w.max(min_side);
    let th = h.max(min_side);
    let mut data = vec![0.0f32; 3 * tw * th];
    for y in 0..th {
        let sy = y.min(h - 1) as u32;
        for x in 0..tw {
            let sx = x.min(w - 1) as u32;
            let p = image.get_pixel(sx, sy).0;
            for c in 0..3 {
                data[(c * th + y) * tw + x] = p[c] as f32 - CHANNEL_MEANS[c];
            }
        }
    }
    Tensor::from_parts(vec![1, 3, th, tw], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x * 3) as u8, (y * 5) as u8, ((x + y) % 256) as u8])
        })
    }

    #[test]
    fn scale_rules() {
        let img = gradient_image(40, 30);
        let (same, s) =
            preprocess_frame(&img, &BBox::new(0.0, 0.0, 107.0, 107.0), TARGET_SIDE).unwrap();
        assert_eq!(s, 1.0);
        assert_eq!(same, img);

        let (half, s) =
            preprocess_frame(&img, &BBox::new(0.0, 0.0, 214.0, 214.0), TARGET_SIDE).unwrap();
        assert_eq!(s, 0.5);
        assert_eq!(half.dimensions(), (20, 15));

        let s = target_scale(&BBox::new(0.0, 0.0, 107.0, 428.0), TARGET_SIDE).unwrap();
        assert!((s - 0.5).abs() < 1e-12);

        assert!(target_scale(&BBox::new(0.0, 0.0, 0.0, 5.0), TARGET_SIDE).is_err());
    }

    #[test]
    fn halving_averages_blocks() {
        let img = RgbImage::from_fn(4, 2, |x, _| {
            image::Rgb([if x % 2 == 0 { 10 } else { 30 }; 3])
        });
        let half = resize_bilinear(&img, 0.5);
        assert_eq!(half.dimensions(), (2, 1));
        assert!(half.pixels().all(|p| p.0 == [20; 3]));
    }

    #[test]
    fn padding_replicates_edges() {
        let img = gradient_image(3, 2);
        let t = image_to_tensor(&img, 5);
        assert_eq!(t.shape(), &[1, 3, 5, 5]);
        let px = |c: usize, y: usize, x: usize| t.data()[(c * 5 + y) * 5 + x];
        assert_eq!(px(0, 4, 4), px(0, 1, 2));
        assert_eq!(px(0, 0, 0), 0.0 - CHANNEL_MEANS[0]);
    }
}
