//! Training loops for the autoencoder family: per-step optimization, epoch
//! iteration over the augmentation stream, validation tracking, and the
//! best-checkpoint policy.

use serde::{Deserialize, Serialize};

use crate::data::corpus::{Corpus, Split};
use crate::data::epoch::build_epoch;
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::model::vae::{vae_loss, LossMix, VaeModel};
use crate::model::vqvae::{vq_loss, VqVae};
use crate::model::HyperParams;
use crate::optim::AdamState;
use crate::tensor::{Scalar, Tensor};

fn default_lr() -> f32 {
    1e-4
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    25
}
fn default_beta() -> f32 {
    0.25
}
fn default_kl() -> f32 {
    0.1
}
fn default_loss_mix() -> LossMix {
    LossMix::Mse
}

/// Optimization knobs; defaults follow the reference training setup
/// (lr 1e-4, batch 64, 25 epochs, commitment weight 0.25, KL weight 0.1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Commitment weight (beta).
    #[serde(default = "default_beta")]
    pub commitment_weight: f32,
    /// KL weight for the continuous-latent baselines.
    #[serde(default = "default_kl")]
    pub kl_weight: f32,
    #[serde(default = "default_loss_mix")]
    pub loss_mix: LossMix,
    /// Optional cap for desk-scale runs; None exhausts the epoch stream.
    #[serde(default)]
    pub max_steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            commitment_weight: default_beta(),
            kl_weight: default_kl(),
            loss_mix: default_loss_mix(),
            max_steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.commitment_weight < 0.0 {
            return Err(Error::invalid("commitment_weight must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VqStepStats {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
}

/// Step-level driver shared by the epoch loop and the overfit oracles.
pub struct VqVaeTrainer<F: Scalar = f32> {
    pub model: VqVae<F>,
    pub adam: AdamState<F>,
    pub beta: F,
}

impl<F: Scalar> VqVaeTrainer<F> {
    pub fn new(model: VqVae<F>, learning_rate: F, beta: F) -> Self {
        VqVaeTrainer { model, adam: AdamState::new(learning_rate), beta }
    }

    /// One forward/backward/update on a [B, 3, I, I] batch.
    pub fn step(&mut self, batch: &Tensor<F>) -> Result<VqStepStats> {
        let mut tape = Tape::new();
        let (fwd, enc_stats, dec_stats) = self.model.forward_train(&mut tape, batch)?;
        let loss = vq_loss(&mut tape, fwd.x, fwd.x_hat, fwd.z_e, fwd.z_q, self.beta)?;
        let stats = VqStepStats {
            reconstruction: tape.value(loss.reconstruction).item().to_f64(),
            codebook: tape.value(loss.codebook).item().to_f64(),
            commitment: tape.value(loss.commitment).item().to_f64(),
            total: tape.value(loss.total).item().to_f64(),
        };
        if !stats.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        tape.backward(loss.total)?;
        self.model.encoder.apply_batch_stats(&enc_stats);
        self.model.decoder.apply_batch_stats(&dec_stats);
        let adam = &mut self.adam;
        adam.begin_step();
        let mut idx = 0usize;
        let mut failure: Option<Error> = None;
        let vars = &fwd.param_vars;
        self.model.for_each_param(&mut |_, p| {
            if failure.is_some() {
                return;
            }
            tape.write_grad(vars[idx], p);
            if let Err(e) = adam.update_param(idx, p) {
                failure = Some(e);
            }
            idx += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        debug_assert_eq!(idx, vars.len());
        Ok(stats)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
    pub perplexity: f64,
    pub val_mse: Option<f64>,
}

pub struct VqTrainOutcome {
    pub model: VqVae<f32>,
    /// Weights at the best validation MSE (the final weights when the corpus
    /// has no validation split).
    pub best_model: VqVae<f32>,
    pub best_epoch: Option<usize>,
    pub curve: Vec<EpochRecord>,
}

fn mean_sq_diff(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = (x - y) as f64;
        s += d * d;
    }
    s / a.len() as f64
}

/// Eval-mode reconstruction MSE over a split (black & white backgrounds).
pub fn reconstruction_mse(model: &VqVae<f32>, corpus: &Corpus, split: Split, batch_size: usize, seed: u64) -> Result<f64> {
    let plan = build_epoch(corpus, split, model.hyper.input_size, batch_size, seed, 0)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for b in 0..plan.n_batches() {
        let batch = plan.batch(corpus, b)?;
        let (x_hat, _) = model.reconstruct(&batch.pixels)?;
        let n = batch.pixels.shape()[0];
        total += mean_sq_diff(x_hat.data(), batch.pixels.data()) * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Full training run: deterministic per seed, per-epoch loss components and
/// codebook perplexity, best-validation tracking.
pub fn train_vqvae(
    corpus: &Corpus,
    hyper: HyperParams,
    config: &TrainConfig,
    seed: u64,
) -> Result<VqTrainOutcome> {
    config.validate()?;
    let model = VqVae::<f32>::new(hyper, seed)?;
    let mut trainer = VqVaeTrainer::new(model, config.learning_rate, config.commitment_weight);
    let mut curve = Vec::new();
    let mut best_model = trainer.model.clone();
    let mut best_epoch = None;
    let mut best_val = f64::INFINITY;
    let has_val = corpus.records.iter().any(|r| r.split == Split::Val);
    for epoch in 0..config.epochs {
        let plan = build_epoch(corpus, Split::Train, hyper.input_size, config.batch_size, seed, epoch as u64)?;
        trainer.model.codebook.reset_usage();
        let n_batches = match config.max_steps_per_epoch {
            Some(cap) => plan.n_batches().min(cap),
            None => plan.n_batches(),
        };
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for b in 0..n_batches {
            let batch = plan.batch(corpus, b)?;
            let stats = trainer.step(&batch.pixels).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFinite(format!(
                    "loss diverged at epoch {epoch} batch {b} (learning rate {})",
                    config.learning_rate
                )),
                other => other,
            })?;
            sums.0 += stats.reconstruction;
            sums.1 += stats.codebook;
            sums.2 += stats.commitment;
            sums.3 += stats.total;
        }
        let n = n_batches as f64;
        let val_mse = if has_val {
            Some(reconstruction_mse(&trainer.model, corpus, Split::Val, config.batch_size, seed)?)
        } else {
            None
        };
        curve.push(EpochRecord {
            epoch,
            reconstruction: sums.0 / n,
            codebook: sums.1 / n,
            commitment: sums.2 / n,
            total: sums.3 / n,
            perplexity: trainer.model.codebook_perplexity(),
            val_mse,
        });
        if let Some(v) = val_mse {
            if v < best_val {
                best_val = v;
                best_model = trainer.model.clone();
                best_epoch = Some(epoch);
            }
        }
    }
    if !has_val {
        best_model = trainer.model.clone();
    }
    Ok(VqTrainOutcome { model: trainer.model, best_model, best_epoch, curve })
}

#[derive(Debug, Clone, Copy)]
pub struct VaeStepStats {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

pub struct VaeTrainer<F: Scalar = f32> {
    pub model: VaeModel<F>,
    pub adam: AdamState<F>,
    pub kl_weight: F,
    pub loss_mix: LossMix,
    noise_rng: rand_chacha::ChaCha8Rng,
}

/// Distinct stream for the reparameterization noise so it never aliases the
/// init or epoch shuffling draws.
const NOISE_STREAM_TAG: u64 = 0x6e6f_6973_655f_7461;

impl<F: Scalar> VaeTrainer<F> {
    pub fn new(model: VaeModel<F>, learning_rate: F, kl_weight: F, loss_mix: LossMix, seed: u64) -> Self {
        use rand::SeedableRng;
        VaeTrainer {
            model,
            adam: AdamState::new(learning_rate),
            kl_weight,
            loss_mix,
            noise_rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM_TAG),
        }
    }

    pub fn step(&mut self, batch: &Tensor<F>) -> Result<VaeStepStats> {
        let mut tape = Tape::new();
        let n = batch.shape()[0];
        let side = batch.shape()[2] >> crate::model::vae::VAE_SCALING_BLOCKS;
        let latent_shape = [n, self.model.hyper.embed_dim, side, side];
        let noise = VaeModel::<F>::sample_noise(&latent_shape, &mut self.noise_rng);
        let (fwd, enc_stats, dec_stats) = self.model.forward_train(&mut tape, batch, &noise)?;
        let loss = vae_loss(&mut tape, fwd.x, fwd.x_hat, fwd.mean, fwd.logvar, self.kl_weight, self.loss_mix)?;
        let stats = VaeStepStats {
            reconstruction: tape.value(loss.reconstruction).item().to_f64(),
            kl: tape.value(loss.kl).item().to_f64(),
            total: tape.value(loss.total).item().to_f64(),
        };
        if !stats.total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        tape.backward(loss.total)?;
        self.model.encoder.apply_batch_stats(&enc_stats);
        self.model.decoder.apply_batch_stats(&dec_stats);
        let adam = &mut self.adam;
        adam.begin_step();
        let mut idx = 0usize;
        let mut failure: Option<Error> = None;
        let vars = &fwd.param_vars;
        self.model.for_each_param(&mut |_, p| {
            if failure.is_some() {
                return;
            }
            tape.write_grad(vars[idx], p);
            if let Err(e) = adam.update_param(idx, p) {
                failure = Some(e);
            }
            idx += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(stats)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VaeEpochRecord {
    pub epoch: usize,
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
    pub val_mse: Option<f64>,
}

pub struct VaeTrainOutcome {
    pub model: VaeModel<f32>,
    pub best_model: VaeModel<f32>,
    pub best_epoch: Option<usize>,
    pub curve: Vec<VaeEpochRecord>,
}

pub fn vae_reconstruction_mse(model: &VaeModel<f32>, corpus: &Corpus, split: Split, batch_size: usize, seed: u64) -> Result<f64> {
    let plan = build_epoch(corpus, split, model.hyper.input_size, batch_size, seed, 0)?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for b in 0..plan.n_batches() {
        let batch = plan.batch(corpus, b)?;
        let x_hat = model.reconstruct(&batch.pixels)?;
        let n = batch.pixels.shape()[0];
        total += mean_sq_diff(x_hat.data(), batch.pixels.data()) * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

pub fn train_vae(
    corpus: &Corpus,
    variant: crate::model::vae::VaeVariant,
    hyper: HyperParams,
    config: &TrainConfig,
    seed: u64,
) -> Result<VaeTrainOutcome> {
    config.validate()?;
    let model = VaeModel::<f32>::new(variant, hyper, seed)?;
    let mut trainer = VaeTrainer::new(model, config.learning_rate, config.kl_weight, config.loss_mix, seed);
    let mut curve = Vec::new();
    let mut best_model = trainer.model.clone();
    let mut best_epoch = None;
    let mut best_val = f64::INFINITY;
    let has_val = corpus.records.iter().any(|r| r.split == Split::Val);
    for epoch in 0..config.epochs {
        let plan = build_epoch(corpus, Split::Train, hyper.input_size, config.batch_size, seed, epoch as u64)?;
        let n_batches = match config.max_steps_per_epoch {
            Some(cap) => plan.n_batches().min(cap),
            None => plan.n_batches(),
        };
        let mut sums = (0.0, 0.0, 0.0);
        for b in 0..n_batches {
            let batch = plan.batch(corpus, b)?;
            let stats = trainer.step(&batch.pixels).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFinite(format!(
                    "loss diverged at epoch {epoch} batch {b} (learning rate {})",
                    config.learning_rate
                )),
                other => other,
            })?;
            sums.0 += stats.reconstruction;
            sums.1 += stats.kl;
            sums.2 += stats.total;
        }
        let n = n_batches as f64;
        let val_mse = if has_val {
            Some(vae_reconstruction_mse(&trainer.model, corpus, Split::Val, config.batch_size, seed)?)
        } else {
            None
        };
        curve.push(VaeEpochRecord {
            epoch,
            reconstruction: sums.0 / n,
            kl: sums.1 / n,
            total: sums.2 / n,
            val_mse,
        });
        if let Some(v) = val_mse {
            if v < best_val {
                best_val = v;
                best_model = trainer.model.clone();
                best_epoch = Some(epoch);
            }
        }
    }
    if !has_val {
        best_model = trainer.model.clone();
    }
    Ok(VaeTrainOutcome { model: trainer.model, best_model, best_epoch, curve })
}
