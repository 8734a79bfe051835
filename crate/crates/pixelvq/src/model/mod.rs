//! Model geometry and the encoder/decoder construction rules.
//!
//! The hyperparameters mirror the symbols the architecture is specified in:
//! input side I, scaling blocks L, codebook size K, embedding width D, final
//! filter count F. Pixels per encoding follow M = 4^L (a 2^L x 2^L patch per
//! grid cell), so one I x I image discretizes into I^2 / M encodings.

pub mod layers;
pub mod ssim;
pub mod training;
pub mod vae;
pub mod vqvae;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ActKind;
use crate::tensor::Scalar;
use layers::{BatchNorm2dLayer, Conv2dLayer, ConvT2dLayer, Layer, Stack};

/// Model geometry and capacity knobs; the single source of truth for shape
/// arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// I: input side length in pixels.
    pub input_size: usize,
    /// L: number of 2x2 stride-2 scaling blocks.
    pub scaling_blocks: usize,
    /// K: number of discrete encodings.
    pub codebook_size: usize,
    /// D: embedding dimensionality (quantization interface width).
    pub embed_dim: usize,
    /// F: filter count of the final scaling block.
    pub filters: usize,
    pub pixelsight: bool,
    pub adapter: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    /// G: encoding grid side, I / 2^L.
    pub grid_side: usize,
    /// M: pixels governed by one encoding, 4^L.
    pub pixels_per_encoding: usize,
    /// G^2 = I^2 / M.
    pub encodings_per_image: usize,
}

/// G = I / 2^L, M = 4^L, encodings = G^2.
pub fn resolve_geometry(input_size: usize, scaling_blocks: usize) -> Result<Geometry> {
    let div = 1usize
        .checked_shl(scaling_blocks as u32)
        .ok_or_else(|| Error::Geometry(format!("2^{scaling_blocks} overflows")))?;
    if input_size == 0 || input_size % div != 0 {
        return Err(Error::Geometry(format!(
            "input size {input_size} not divisible by 2^{scaling_blocks}"
        )));
    }
    let grid_side = input_size / div;
    Ok(Geometry {
        grid_side,
        pixels_per_encoding: div * div,
        encodings_per_image: grid_side * grid_side,
    })
}

impl HyperParams {
    pub fn geometry(&self) -> Result<Geometry> {
        resolve_geometry(self.input_size, self.scaling_blocks)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        if self.codebook_size < 2 {
            return Err(Error::invalid(format!("codebook size {} < 2", self.codebook_size)));
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embedding dimension must be >= 1"));
        }
        if self.filters < self.embed_dim {
            return Err(Error::invalid(format!(
                "filter count {} < embedding dimension {}",
                self.filters, self.embed_dim
            )));
        }
        if self.scaling_blocks == 0 {
            // With no scaling blocks, the only per-pixel path runs through
            // both enhancements.
            if !self.pixelsight && !self.adapter {
                return Err(Error::Capability(
                    "L=0 without the PixelSight block and the Adapter layer has no layers at all; \
                     both enhancements are required"
                        .into(),
                ));
            }
            if !self.pixelsight {
                return Err(Error::Capability(
                    "L=0 requires the PixelSight block (missing enhancement: pixelsight)".into(),
                ));
            }
            if !self.adapter {
                return Err(Error::Capability(
                    "L=0 requires the Adapter layer (missing enhancement: adapter)".into(),
                ));
            }
        }
        Ok(())
    }

    /// Width the last scaling block must produce: F with an Adapter behind
    /// it, else the quantization interface forces D filters.
    pub fn final_block_width(&self) -> usize {
        if self.adapter {
            self.filters
        } else {
            self.embed_dim
        }
    }

    /// Scaling-block output widths, halving toward the final block.
    pub fn block_widths(&self) -> Vec<usize> {
        let last = self.final_block_width();
        (0..self.scaling_blocks)
            .map(|i| (last >> (self.scaling_blocks - 1 - i)).max(1))
            .collect()
    }

    /// PixelSight width continues the halving schedule one step below the
    /// first scaling block.
    pub fn pixelsight_width(&self) -> usize {
        (self.final_block_width() >> self.scaling_blocks).max(1)
    }
}

/// Encoder: [PixelSight] + L scaling blocks + [Adapter]; output [N, D, G, G].
pub fn build_encoder<F: Scalar>(hyper: &HyperParams, rng: &mut ChaCha8Rng) -> Result<Stack<F>> {
    hyper.validate()?;
    let mut layers: Vec<Layer<F>> = Vec::new();
    let mut channels = 3usize;
    if hyper.pixelsight {
        let width = hyper.pixelsight_width();
        layers.push(Layer::Conv(Conv2dLayer::new(channels, width, 1, 1, rng)));
        layers.push(Layer::Norm(BatchNorm2dLayer::new(width)));
        layers.push(Layer::Act(ActKind::Relu));
        channels = width;
    }
    for width in hyper.block_widths() {
        layers.push(Layer::Conv(Conv2dLayer::new(channels, width, 2, 2, rng)));
        layers.push(Layer::Norm(BatchNorm2dLayer::new(width)));
        layers.push(Layer::Act(ActKind::Relu));
        channels = width;
    }
    if hyper.adapter {
        layers.push(Layer::Conv(Conv2dLayer::new(channels, hyper.embed_dim, 1, 1, rng)));
        // linear activation leaves the embedding space unrestricted
    }
    Ok(Stack { layers })
}

/// Decoder: mirror of the encoder. [Adapter D->F] + L transposed blocks +
/// [PixelSight tail to 3 channels]; sigmoid on the output layer.
pub fn build_decoder<F: Scalar>(hyper: &HyperParams, rng: &mut ChaCha8Rng) -> Result<Stack<F>> {
    hyper.validate()?;
    let mut layers: Vec<Layer<F>> = Vec::new();
    let widths = hyper.block_widths();
    let mut channels = hyper.embed_dim;
    if hyper.adapter {
        layers.push(Layer::Conv(Conv2dLayer::new(channels, hyper.filters, 1, 1, rng)));
        channels = hyper.filters;
    }
    for j in 0..hyper.scaling_blocks {
        let is_last_block = j + 1 == hyper.scaling_blocks;
        let out = if is_last_block {
            if hyper.pixelsight {
                hyper.pixelsight_width()
            } else {
                3
            }
        } else {
            widths[hyper.scaling_blocks - 2 - j]
        };
        layers.push(Layer::ConvT(ConvT2dLayer::new(channels, out, 2, 2, rng)));
        if is_last_block && !hyper.pixelsight {
            layers.push(Layer::Act(ActKind::Sigmoid));
        } else {
            layers.push(Layer::Norm(BatchNorm2dLayer::new(out)));
            layers.push(Layer::Act(ActKind::Relu));
        }
        channels = out;
    }
    if hyper.pixelsight {
        layers.push(Layer::ConvT(ConvT2dLayer::new(channels, 3, 1, 1, rng)));
        layers.push(Layer::Act(ActKind::Sigmoid));
    }
    Ok(Stack { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BatchNormMode, Tape};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn run_stack(stack: &Stack<f32>, input: Tensor<f32>) -> Vec<usize> {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let mut pv = Vec::new();
        let (y, _) = stack.forward(&mut tape, x, BatchNormMode::Train, false, &mut pv).unwrap();
        tape.shape(y).to_vec()
    }

    #[test]
    fn worked_geometry_example() {
        let g = resolve_geometry(64, 2).unwrap();
        assert_eq!((g.grid_side, g.pixels_per_encoding, g.encodings_per_image), (16, 16, 256));
    }

    #[test]
    fn m_list_matches_l_values() {
        // L = 2, 1, 0 correspond to M = 16, 4, 1
        for (l, m) in [(2usize, 16usize), (1, 4), (0, 1)] {
            assert_eq!(resolve_geometry(64, l).unwrap().pixels_per_encoding, m);
        }
        let g = resolve_geometry(64, 0).unwrap();
        assert_eq!(g.encodings_per_image, 4096);
        let g = resolve_geometry(32, 1).unwrap();
        assert_eq!((g.grid_side, g.pixels_per_encoding, g.encodings_per_image), (16, 4, 256));
    }

    #[test]
    fn indivisible_input_is_a_geometry_error() {
        assert!(matches!(resolve_geometry(30, 2), Err(Error::Geometry(_))));
    }

    fn medres() -> HyperParams {
        HyperParams {
            input_size: 64,
            scaling_blocks: 1,
            codebook_size: 256,
            embed_dim: 32,
            filters: 512,
            pixelsight: true,
            adapter: true,
        }
    }

    #[test]
    fn medres_encoder_shape_and_structure() {
        let hyper = medres();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = build_encoder::<f32>(&hyper, &mut rng).unwrap();
        // PixelSight (conv+norm+act), one 512-filter block, Adapter
        let desc = enc.describe();
        assert_eq!(desc[0], "conv [256, 3, 1, 1] stride 1 pad 0");
        assert_eq!(desc[3], "conv [512, 256, 2, 2] stride 2 pad 0");
        assert_eq!(desc[6], "conv [32, 512, 1, 1] stride 1 pad 0");
        let shape = run_stack(&enc, Tensor::zeros(&[2, 3, 64, 64]));
        assert_eq!(shape, vec![2, 32, 32, 32]);
    }

    #[test]
    fn medres_decoder_mirrors_back_to_image() {
        let hyper = medres();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = build_decoder::<f32>(&hyper, &mut rng).unwrap();
        let shape = run_stack(&dec, Tensor::zeros(&[2, 32, 32, 32]));
        assert_eq!(shape, vec![2, 3, 64, 64]);
    }

    #[test]
    fn plain_lowres_final_block_is_forced_to_embed_dim() {
        let hyper = HyperParams {
            input_size: 64,
            scaling_blocks: 2,
            codebook_size: 256,
            embed_dim: 64,
            filters: 512,
            pixelsight: false,
            adapter: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = build_encoder::<f32>(&hyper, &mut rng).unwrap();
        let desc = enc.describe();
        // blocks halve toward D: 32 then 64 filters
        assert_eq!(desc[0], "conv [32, 3, 2, 2] stride 2 pad 0");
        assert_eq!(desc[3], "conv [64, 32, 2, 2] stride 2 pad 0");
        let shape = run_stack(&enc, Tensor::zeros(&[2, 3, 64, 64]));
        assert_eq!(shape, vec![2, 64, 16, 16]);
    }

    #[test]
    fn plain_model_with_no_scaling_blocks_is_rejected() {
        let hyper = HyperParams {
            input_size: 64,
            scaling_blocks: 0,
            codebook_size: 256,
            embed_dim: 32,
            filters: 512,
            pixelsight: false,
            adapter: false,
        };
        assert!(matches!(hyper.validate(), Err(Error::Capability(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(build_encoder::<f32>(&hyper, &mut rng).is_err());
    }

    #[test]
    fn hires_decoder_is_adapter_plus_pixelsight_only() {
        let hyper = HyperParams {
            input_size: 64,
            scaling_blocks: 0,
            codebook_size: 256,
            embed_dim: 32,
            filters: 512,
            pixelsight: true,
            adapter: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = build_decoder::<f32>(&hyper, &mut rng).unwrap();
        let desc = dec.describe();
        assert_eq!(
            desc,
            vec![
                "conv [512, 32, 1, 1] stride 1 pad 0".to_string(),
                "convt [512, 3, 1, 1] stride 1".to_string(),
                "act Sigmoid".to_string(),
            ]
        );
        let shape = run_stack(&dec, Tensor::zeros(&[2, 32, 64, 64]));
        assert_eq!(shape, vec![2, 3, 64, 64]);
    }

    #[test]
    fn decoder_outputs_stay_in_unit_interval() {
        let hyper = HyperParams {
            input_size: 16,
            scaling_blocks: 1,
            codebook_size: 8,
            embed_dim: 4,
            filters: 8,
            pixelsight: true,
            adapter: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = build_decoder::<f32>(&hyper, &mut rng).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::uniform(&[2, 4, 8, 8], 10.0, &mut rng));
        let mut pv = Vec::new();
        let (y, _) = dec.forward(&mut tape, z, BatchNormMode::Train, false, &mut pv).unwrap();
        for &v in tape.value(y).data() {
            assert!(v > 0.0 && v < 1.0, "sigmoid output {v} escaped (0,1)");
        }
    }
}
