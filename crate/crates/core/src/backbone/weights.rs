use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cwb::{decode_cwb, encode_cwb, CwbError};
use crate::error::Result;
use crate::nn::Tensor;

/// Output channel counts of conv1..conv3. Kernel sizes (7, 5, 3) and the
/// three-channel input are fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneArch {
    pub channels: [usize; 3],
}

impl BackboneArch {
    pub const VGG_M: BackboneArch = BackboneArch {
        channels: [96, 256, 512],
    };
    /// Quarter-width variant used with seeded random weights.
    pub const TOY: BackboneArch = BackboneArch {
        channels: [32, 64, 128],
    };

    pub const KERNELS: [usize; 3] = [7, 5, 3];

    pub fn out_channels(&self) -> usize {
        self.channels[2]
    }

    pub fn kernel_shape(&self, layer: usize) -> [usize; 4] {
        let cin = if layer == 0 {
            3
        } else {
            self.channels[layer - 1]
        };
        let k = Self::KERNELS[layer];
        [self.channels[layer], cin, k, k]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Frozen conv1..conv3 of the feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    arch: BackboneArch,
    pub layers: [ConvLayer; 3],
}

const NAMES: [&str; 3] = ["conv1", "conv2", "conv3"];

impl BackboneWeights {
    pub fn new(arch: BackboneArch, layers: [ConvLayer; 3]) -> std::result::Result<Self, CwbError> {
        for (i, layer) in layers.iter().enumerate() {
            let expected = arch.kernel_shape(i).to_vec();
            if layer.kernel.shape() != expected {
                return Err(CwbError::ShapeMismatch {
                    name: format!("{}.weight", NAMES[i]),
                    expected,
                    found: layer.kernel.shape().to_vec(),
                });
            }
            if layer.bias.shape() != [arch.channels[i]] {
                return Err(CwbError::ShapeMismatch {
                    name: format!("{}.bias", NAMES[i]),
                    expected: vec![arch.channels[i]],
                    found: layer.bias.shape().to_vec(),
                });
            }
            if !layer.kernel.is_finite() || !layer.bias.is_finite() {
                return Err(CwbError::NonFinite(NAMES[i].into()));
            }
        }
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> BackboneArch {
        self.arch
    }

    /// All-zero weights and biases.
    pub fn zeros(arch: BackboneArch) -> Self {
        let layers = std::array::from_fn(|i| ConvLayer {
            kernel: Tensor::zeros(&arch.kernel_shape(i)),
            bias: Tensor::zeros(&[arch.channels[i]]),
        });
        Self { arch, layers }
    }

    /// Seeded random weights, He-scaled per layer. On mean-subtracted 8-bit
    /// input this keeps activations at the pixel scale, roughly where a
    /// pretrained VGG-M's conv3 responses sit.
    pub fn random(arch: BackboneArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = std::array::from_fn(|i| {
            let shape = arch.kernel_shape(i);
            let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
            let std = (2.0 / fan_in).sqrt();
            ConvLayer {
                kernel: Tensor::randn(&shape, std, &mut rng),
                bias: Tensor::zeros(&[arch.channels[i]]),
            }
        });
        Self { arch, layers }
    }

    pub fn from_cwb_bytes(bytes: &[u8], arch: BackboneArch) -> std::result::Result<Self, CwbError> {
        let mut entries = decode_cwb(bytes)?;
        let mut take = |name: String| -> std::result::Result<Tensor, CwbError> {
            let pos = entries
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| CwbError::Missing(name.clone()))?;
            Ok(entries.swap_remove(pos).1)
        };
        let mut layers = Vec::with_capacity(3);
        for name in NAMES {
            layers.push(ConvLayer {
                kernel: take(format!("{name}.weight"))?,
                bias: take(format!("{name}.bias"))?,
            });
        }
        let layers: [ConvLayer; 3] = layers.try_into().expect("three layers");
        Self::new(arch, layers)
    }

    pub fn to_cwb_bytes(&self) -> Vec<u8> {
        let names: Vec<(String, &Tensor)> = NAMES
            .iter()
            .zip(&self.layers)
            .flat_map(|(n, l)| {
                [
                    (format!("{n}.weight"), &l.kernel),
                    (format!("{n}.bias"), &l.bias),
                ]
            })
            .collect();
        let refs: Vec<(&str, &Tensor)> = names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        encode_cwb(&refs)
    }

    pub fn save_cwb(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_cwb_bytes())?;
        Ok(())
    }

    /// Loads and validates against an explicit architecture.
    pub fn load_cwb_as(path: impl AsRef<Path>, arch: BackboneArch) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::from_cwb_bytes(&bytes, arch)?)
    }
}

/// Loads conv1..conv3 weights for the full-width VGG-M layout.
pub fn load_cwb(path: impl AsRef<Path>) -> Result<BackboneWeights> {
    BackboneWeights::load_cwb_as(path, BackboneArch::VGG_M)
}
