use super::weights::BackboneWeights;
use crate::error::{Error, Result};
use crate::nn::{conv2d, lrn, maxpool2d, relu, Conv2dParams, LrnParams, Tensor};

/// Affine map from feature-cell indices to continuous preprocessed-frame
/// coordinates: cell `i` is centred at `offset + stride·i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureGeometry {
    pub stride: f64,
    pub offset: f64,
    pub receptive_field: usize,
}

/// One layer's spatial footprint for receptive-field bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct LayerFootprint {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl LayerFootprint {
    const fn new(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation,
            padding: 0,
        }
    }
}

/// conv1 → pool → conv2 → conv3 (dilation 3).
pub const LAYER_CHAIN: [LayerFootprint; 4] = [
    LayerFootprint::new(7, 2, 1),
    LayerFootprint::new(3, 2, 1),
    LayerFootprint::new(5, 2, 1),
    LayerFootprint::new(3, 1, 3),
];

/// Composes strides, receptive field and first-cell centre of a chain.
/// Pixel `p` spans `[p, p + 1)`, so the input starts at centre 0.5.
pub fn compose_geometry(chain: &[LayerFootprint]) -> FeatureGeometry {
    let mut jump = 1usize;
    let mut rf = 1usize;
    let mut start = 0.5f64;
    for l in chain {
        let span = l.dilation * (l.kernel - 1) + 1;
        rf += (span - 1) * jump;
        start += ((span - 1) as f64 / 2.0 - l.padding as f64) * jump as f64;
        jump *= l.stride;
    }
    FeatureGeometry {
        stride: jump as f64,
        offset: start,
        receptive_field: rf,
    }
}

/// Conv-3 output plus the geometry tying it to frame pixels.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub geometry: FeatureGeometry,
}

impl FeatureMap {
    pub fn new(tensor: Tensor, geometry: FeatureGeometry) -> Result<Self> {
        let (n, ..) = tensor.dims4("feature map")?;
        if n != 1 {
            return Err(Error::shape("feature map", format!("batch {n} != 1")));
        }
        Ok(Self { tensor, geometry })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }
}

/// Smallest square input that yields one conv3 output cell.
pub fn min_input_side() -> usize {
    compose_geometry(&LAYER_CHAIN).receptive_field
}

/// Runs conv1 → relu → lrn → maxpool → conv2 → relu → lrn → conv3 → relu
/// over a `1×3×H×W` image tensor.
pub fn extract_features(image: &Tensor, weights: &BackboneWeights) -> Result<FeatureMap> {
    let (n, c, h, w) = image.dims4("extract_features")?;
    let min = min_input_side();
    if n != 1 || c != 3 {
        return Err(Error::shape(
            "extract_features",
            format!("expected 1x3xHxW input, got {:?}", image.shape()),
        ));
    }
    if h < min || w < min {
        return Err(Error::shape(
            "extract_features",
            format!("input {h}x{w} smaller than minimum {min}x{min}"),
        ));
    }
    let lrn_p = LrnParams::default();
    let [l1, l2, l3] = &weights.layers;
    let x = conv2d(image, &l1.kernel, &l1.bias, Conv2dParams::new(2, 1, 0))?;
    let x = lrn(&relu(&x), &lrn_p)?;
    let x = maxpool2d(&x, 3, 2)?.output;
    let x = conv2d(&x, &l2.kernel, &l2.bias, Conv2dParams::new(2, 1, 0))?;
    let x = lrn(&relu(&x), &lrn_p)?;
    let x = conv2d(&x, &l3.kernel, &l3.bias, Conv2dParams::new(1, 3, 0))?;
    FeatureMap::new(relu(&x), compose_geometry(&LAYER_CHAIN))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneArch;
    use crate::nn::conv_output_extent;

    #[test]
    fn geometry_of_chain() {
        let g = compose_geometry(&LAYER_CHAIN);
        assert_eq!(g.stride, 8.0);
        assert_eq!(g.receptive_field, 75);
        assert_eq!(g.offset, 37.5);
    }

    #[test]
    fn dilation_replaces_second_pool() {
        let with_pool = [
            LayerFootprint::new(7, 2, 1),
            LayerFootprint::new(3, 2, 1),
            LayerFootprint::new(5, 2, 1),
            LayerFootprint::new(3, 2, 1),
            LayerFootprint::new(3, 1, 1),
        ];
        assert_eq!(
            compose_geometry(&with_pool).receptive_field,
            compose_geometry(&LAYER_CHAIN).receptive_field
        );
    }

    #[test]
    fn output_extent_for_107() {
        // 107 -conv1-> 51 -pool-> 25 -conv2-> 11 -conv3(d3)-> 5
        let mut e = 107;
        for l in LAYER_CHAIN {
            e = conv_output_extent(e, l.kernel, l.stride, l.dilation, 0).unwrap();
        }
        assert_eq!(e, 5);
        let w = BackboneWeights::zeros(BackboneArch::TOY);
        let fm = extract_features(&Tensor::zeros(&[1, 3, 107, 107]), &w).unwrap();
        assert_eq!(fm.tensor.shape(), &[1, 128, 5, 5]);
        assert!(fm.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn undersized_input() {
        let w = BackboneWeights::zeros(BackboneArch::TOY);
        assert!(extract_features(&Tensor::zeros(&[1, 3, 74, 200]), &w).is_err());
        assert!(extract_features(&Tensor::zeros(&[1, 3, 75, 75]), &w).is_ok());
    }

    #[test]
    fn deterministic() {
        let w = BackboneWeights::random(BackboneArch::TOY, 1);
        let img = Tensor::from_fn(&[1, 3, 90, 100], |i| ((i * 37) % 255) as f32 - 120.0);
        let a = extract_features(&img, &w).unwrap();
        let b = extract_features(&img, &w).unwrap();
        assert_eq!(a.tensor, b.tensor);
    }
}
