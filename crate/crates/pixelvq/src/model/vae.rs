//! Continuous-latent baselines: a plain convolutional VAE with four scaling
//! blocks per side, and the enhanced variant that adds PixelSight blocks and
//! an MSE + (1 - SSIM) + 0.1 * KL objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ActKind, BatchNormMode, Tape, Var};
use crate::model::layers::{BatchNorm2dLayer, Conv2dLayer, ConvT2dLayer, Layer, PendingStats, Stack};
use crate::model::ssim::ssim_mean;
use crate::model::HyperParams;
use crate::tensor::{Scalar, Tensor};

pub const VAE_SCALING_BLOCKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VaeVariant {
    Plain,
    PixelVae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMix {
    Mse,
    MsePlusSsim,
}

#[derive(Debug, Clone)]
pub struct VaeModel<F: Scalar = f32> {
    pub variant: VaeVariant,
    pub hyper: HyperParams,
    pub encoder: Stack<F>,
    pub mean_head: Conv2dLayer<F>,
    pub logvar_head: Conv2dLayer<F>,
    pub decoder: Stack<F>,
}

pub struct VaeForward {
    pub x: Var,
    pub mean: Var,
    pub logvar: Var,
    pub latent: Var,
    pub x_hat: Var,
    pub param_vars: Vec<Var>,
}

impl<F: Scalar> VaeModel<F> {
    /// Four 2x2 stride-2 blocks per side; the latent is spatial with
    /// `hyper.embed_dim` channels. PixelVae adds the per-pixel head and tail.
    pub fn new(variant: VaeVariant, hyper: HyperParams, seed: u64) -> Result<Self> {
        let l = VAE_SCALING_BLOCKS;
        if hyper.input_size % (1 << l) != 0 {
            return Err(Error::Geometry(format!(
                "input size {} not divisible by 2^{l}",
                hyper.input_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixelsight = matches!(variant, VaeVariant::PixelVae);
        let f = hyper.filters;
        let widths: Vec<usize> = (0..l).map(|i| (f >> (l - 1 - i)).max(1)).collect();
        let ps_width = (f >> l).max(1);

        let mut enc: Vec<Layer<F>> = Vec::new();
        let mut channels = 3usize;
        if pixelsight {
            enc.push(Layer::Conv(Conv2dLayer::new(channels, ps_width, 1, 1, &mut rng)));
            enc.push(Layer::Norm(BatchNorm2dLayer::new(ps_width)));
            enc.push(Layer::Act(ActKind::Relu));
            channels = ps_width;
        }
        for &width in &widths {
            enc.push(Layer::Conv(Conv2dLayer::new(channels, width, 2, 2, &mut rng)));
            enc.push(Layer::Norm(BatchNorm2dLayer::new(width)));
            enc.push(Layer::Act(ActKind::Relu));
            channels = width;
        }
        let mean_head = Conv2dLayer::new(channels, hyper.embed_dim, 1, 1, &mut rng);
        let logvar_head = Conv2dLayer::new(channels, hyper.embed_dim, 1, 1, &mut rng);

        let mut dec: Vec<Layer<F>> = Vec::new();
        let mut dchannels = hyper.embed_dim;
        dec.push(Layer::Conv(Conv2dLayer::new(dchannels, f, 1, 1, &mut rng)));
        dchannels = f;
        for j in 0..l {
            let is_last = j + 1 == l;
            let out = if is_last {
                if pixelsight {
                    ps_width
                } else {
                    3
                }
            } else {
                widths[l - 2 - j]
            };
            dec.push(Layer::ConvT(ConvT2dLayer::new(dchannels, out, 2, 2, &mut rng)));
            if is_last && !pixelsight {
                dec.push(Layer::Act(ActKind::Sigmoid));
            } else {
                dec.push(Layer::Norm(BatchNorm2dLayer::new(out)));
                dec.push(Layer::Act(ActKind::Relu));
            }
            dchannels = out;
        }
        if pixelsight {
            dec.push(Layer::ConvT(ConvT2dLayer::new(dchannels, 3, 1, 1, &mut rng)));
            dec.push(Layer::Act(ActKind::Sigmoid));
        }

        Ok(VaeModel {
            variant,
            hyper,
            encoder: Stack { layers: enc },
            mean_head,
            logvar_head,
            decoder: Stack { layers: dec },
        })
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.encoder.for_each_param("encoder", f);
        f("mean_head.weight".into(), &mut self.mean_head.weight);
        f("mean_head.bias".into(), &mut self.mean_head.bias);
        f("logvar_head.weight".into(), &mut self.logvar_head.weight);
        f("logvar_head.bias".into(), &mut self.logvar_head.bias);
        self.decoder.for_each_param("decoder", f);
    }

    pub fn for_each_buffer(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.encoder.for_each_buffer("encoder", f);
        self.decoder.for_each_buffer("decoder", f);
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.decoder.param_count()
            + self.mean_head.weight.numel()
            + self.mean_head.bias.numel()
            + self.logvar_head.weight.numel()
            + self.logvar_head.bias.numel()
    }

    fn head(
        tape: &mut Tape<F>,
        layer: &Conv2dLayer<F>,
        x: Var,
        train: bool,
        param_vars: &mut Vec<Var>,
    ) -> Result<Var> {
        let (mut w, mut b) = (layer.weight.clone(), layer.bias.clone());
        w.requires_grad = train;
        b.requires_grad = train;
        let wv = tape.leaf(&w);
        let bv = tape.leaf(&b);
        param_vars.push(wv);
        param_vars.push(bv);
        tape.conv2d(x, wv, Some(bv), layer.stride, layer.padding)
    }

    /// Reparameterized forward: latent = mean + exp(logvar / 2) * noise.
    /// Pass the noise explicitly so gradient checks can freeze it.
    pub fn forward_train(
        &self,
        tape: &mut Tape<F>,
        batch: &Tensor<F>,
        noise: &Tensor<F>,
    ) -> Result<(VaeForward, Vec<PendingStats<F>>, Vec<PendingStats<F>>)> {
        let mut param_vars = Vec::new();
        let x = tape.constant(batch.clone());
        let (h, enc_stats) =
            self.encoder.forward(tape, x, BatchNormMode::Train, true, &mut param_vars)?;
        let mean = Self::head(tape, &self.mean_head, h, true, &mut param_vars)?;
        let logvar = Self::head(tape, &self.logvar_head, h, true, &mut param_vars)?;
        if noise.shape() != tape.shape(mean) {
            return Err(Error::dim(0, format!(
                "noise shape {:?} != latent shape {:?}",
                noise.shape(),
                tape.shape(mean)
            )));
        }
        let half = tape.scale(logvar, F::from_f64(0.5));
        let std = tape.exp(half);
        let eps = tape.constant(noise.clone());
        let scaled = tape.mul(std, eps);
        let latent = tape.add(mean, scaled);
        let (x_hat, dec_stats) =
            self.decoder.forward(tape, latent, BatchNormMode::Train, true, &mut param_vars)?;
        Ok((VaeForward { x, mean, logvar, latent, x_hat, param_vars }, enc_stats, dec_stats))
    }

    /// Eval-mode reconstruction through the latent mean (no sampling).
    pub fn reconstruct(&self, batch: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let mut pv = Vec::new();
        let x = tape.constant(batch.clone());
        let (h, _) = self.encoder.forward(&mut tape, x, BatchNormMode::Eval, false, &mut pv)?;
        let mean = Self::head(&mut tape, &self.mean_head, h, false, &mut pv)?;
        let (x_hat, _) = self.decoder.forward(&mut tape, mean, BatchNormMode::Eval, false, &mut pv)?;
        Ok(tape.value(x_hat).clone())
    }

    pub fn sample_noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                F::from_f64(v)
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }
}

pub struct VaeLossVars {
    pub reconstruction: Var,
    pub kl: Var,
    pub total: Var,
}

/// KL against the standard normal: -0.5 * mean(1 + logvar - mean^2 - e^logvar).
pub fn kl_standard_normal<F: Scalar>(tape: &mut Tape<F>, mean: Var, logvar: Var) -> Var {
    let mu2 = tape.mul(mean, mean);
    let elv = tape.exp(logvar);
    let t = tape.add_scalar(logvar, F::ONE);
    let t = tape.sub(t, mu2);
    let t = tape.sub(t, elv);
    let m = tape.mean(t);
    tape.scale(m, F::from_f64(-0.5))
}

/// total = recon + kl_weight * KL, where recon is MSE or MSE + (1 - SSIM).
pub fn vae_loss<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    x_hat: Var,
    mean: Var,
    logvar: Var,
    kl_weight: F,
    loss_mix: LossMix,
) -> Result<VaeLossVars> {
    let mse = tape.mse(x_hat, x)?;
    let reconstruction = match loss_mix {
        LossMix::Mse => mse,
        LossMix::MsePlusSsim => {
            let ssim = ssim_mean(tape, x_hat, x)?;
            let neg = tape.scale(ssim, -F::ONE);
            let one_minus = tape.add_scalar(neg, F::ONE);
            tape.add(mse, one_minus)
        }
    };
    let kl = kl_standard_normal(tape, mean, logvar);
    let weighted = tape.scale(kl, kl_weight);
    let total = tape.add(reconstruction, weighted);
    Ok(VaeLossVars { reconstruction, kl, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn hyper(i: usize) -> HyperParams {
        HyperParams {
            input_size: i,
            scaling_blocks: VAE_SCALING_BLOCKS,
            codebook_size: 2,
            embed_dim: 4,
            filters: 16,
            pixelsight: false,
            adapter: false,
        }
    }

    #[test]
    fn kl_of_standard_normal_parameters_is_zero() {
        let mut tape = Tape::<f32>::new();
        let mean = tape.constant(Tensor::zeros(&[2, 4, 1, 1]));
        let logvar = tape.constant(Tensor::zeros(&[2, 4, 1, 1]));
        let kl = kl_standard_normal(&mut tape, mean, logvar);
        assert_eq!(tape.value(kl).item(), 0.0);
    }

    #[test]
    fn kl_weight_composes_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::<f32>::uniform(&[2, 3, 16, 16], 0.4, &mut rng).map(f32::abs));
        let xh = tape.constant(Tensor::<f32>::uniform(&[2, 3, 16, 16], 0.4, &mut rng).map(f32::abs));
        let mean = tape.constant(Tensor::uniform(&[2, 4, 1, 1], 0.5, &mut rng));
        let logvar = tape.constant(Tensor::uniform(&[2, 4, 1, 1], 0.5, &mut rng));
        let loss = vae_loss(&mut tape, x, xh, mean, logvar, 0.1, LossMix::Mse).unwrap();
        let recon = tape.value(loss.reconstruction).item();
        let kl = tape.value(loss.kl).item();
        let total = tape.value(loss.total).item();
        assert!((total - (recon + 0.1 * kl)).abs() < 1e-7);
    }

    #[test]
    fn forward_shapes_round_trip() {
        let model = VaeModel::<f32>::new(VaeVariant::Plain, hyper(16), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = Tensor::<f32>::uniform(&[2, 3, 16, 16], 0.5, &mut rng).map(f32::abs);
        let noise = VaeModel::<f32>::sample_noise(&[2, 4, 1, 1], &mut rng);
        let mut tape = Tape::new();
        let (fwd, _, _) = model.forward_train(&mut tape, &batch, &noise).unwrap();
        assert_eq!(tape.shape(fwd.mean), &[2, 4, 1, 1]);
        assert_eq!(tape.shape(fwd.x_hat), &[2, 3, 16, 16]);
        let recon = model.reconstruct(&batch).unwrap();
        assert_eq!(recon.shape(), batch.shape());
    }

    #[test]
    fn pixel_vae_has_pixelsight_head_and_tail() {
        let model = VaeModel::<f32>::new(VaeVariant::PixelVae, hyper(16), 1).unwrap();
        let head = model.encoder.describe()[0].clone();
        assert_eq!(head, "conv [1, 3, 1, 1] stride 1 pad 0");
        let tail: Vec<String> = model.decoder.describe();
        assert_eq!(tail[tail.len() - 2], "convt [1, 3, 1, 1] stride 1");
        assert_eq!(tail[tail.len() - 1], "act Sigmoid");
    }
}
