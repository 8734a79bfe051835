//! The quantized autoencoder: nearest-neighbor discretization against a
//! learned codebook, straight-through gradients, and the three-term loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchNormMode, Tape, Var};
use crate::model::layers::{PendingStats, Stack};
use crate::model::{build_decoder, build_encoder, HyperParams};
use crate::tensor::{Scalar, Tensor};

/// K x D embedding table plus usage counters.
#[derive(Debug, Clone)]
pub struct CodebookState<F: Scalar = f32> {
    pub embeddings: Tensor<F>,
    pub usage_counts: Vec<u64>,
}

impl<F: Scalar> CodebookState<F> {
    pub fn new(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        // small uniform init keeps early nearest-neighbor assignments spread
        CodebookState {
            embeddings: Tensor::uniform(&[k, d], 1.0 / k as f64, rng),
            usage_counts: vec![0; k],
        }
    }

    pub fn k(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage_counts[i] += 1;
        }
    }
}

/// Integer grid of codebook indices for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodingGrid {
    pub indices: Vec<u32>,
    pub side: usize,
}

impl EncodingGrid {
    pub fn new(indices: Vec<u32>, side: usize) -> Result<Self> {
        if indices.len() != side * side {
            return Err(Error::dim(0, format!("grid wants {} indices, got {}", side * side, indices.len())));
        }
        Ok(EncodingGrid { indices, side })
    }

    pub fn validate_against(&self, k: usize, grid_side: usize) -> Result<()> {
        if self.side != grid_side {
            return Err(Error::Geometry(format!("grid side {} != expected {}", self.side, grid_side)));
        }
        for &i in &self.indices {
            if i as usize >= k {
                return Err(Error::IndexRange { index: i as usize, limit: k });
            }
        }
        Ok(())
    }
}

/// Nearest-neighbor search per spatial position: argmin_k ||z_e - e_k||^2,
/// ties broken by the lowest index. Returns flat indices (row-major over
/// [N, G, G]) and z_q holding exact copies of the selected rows.
pub fn nearest_codebook_rows<F: Scalar>(
    z_e: &Tensor<F>,
    embeddings: &Tensor<F>,
) -> (Vec<usize>, Tensor<F>) {
    let zs = z_e.shape();
    assert_eq!(zs.len(), 4, "z_e must be [N, D, G, G]");
    let (n, d, gh, gw) = (zs[0], zs[1], zs[2], zs[3]);
    let es = embeddings.shape();
    assert_eq!(es[1], d, "codebook width mismatch");
    let k = es[0];
    let zd = z_e.data();
    let ed = embeddings.data();
    let hw = gh * gw;
    let mut indices = vec![0usize; n * hw];
    let mut zq = vec![F::ZERO; zd.len()];
    for ni in 0..n {
        for p in 0..hw {
            let mut best = 0usize;
            let mut best_dist = F::from_f64(f64::INFINITY);
            for ki in 0..k {
                let mut dist = F::ZERO;
                for di in 0..d {
                    let diff = zd[(ni * d + di) * hw + p] - ed[ki * d + di];
                    dist += diff * diff;
                }
                if dist < best_dist {
                    best_dist = dist;
                    best = ki;
                }
            }
            indices[ni * hw + p] = best;
            for di in 0..d {
                zq[(ni * d + di) * hw + p] = ed[best * d + di];
            }
        }
    }
    (indices, Tensor::from_vec(zs, zq).unwrap())
}

/// Spec-shaped quantize: updates usage counters and returns per-item grids.
pub fn quantize<F: Scalar>(
    z_e: &Tensor<F>,
    codebook: &mut CodebookState<F>,
) -> (Tensor<F>, Vec<EncodingGrid>) {
    let (indices, z_q) = nearest_codebook_rows(z_e, &codebook.embeddings);
    codebook.record_usage(&indices);
    let side = z_e.shape()[2];
    let grids = indices
        .chunks(side * side)
        .map(|c| EncodingGrid::new(c.iter().map(|&i| i as u32).collect(), side).unwrap())
        .collect();
    (z_q, grids)
}

/// Scalar components of the quantized-autoencoder objective.
pub struct VqLossVars {
    pub reconstruction: Var,
    pub codebook: Var,
    pub commitment: Var,
    pub total: Var,
}

/// recon = MSE(x_hat, x); codebook = ||sg(z_e) - z_q||^2 mean;
/// commitment = beta * ||z_e - sg(z_q)||^2 mean; total = sum.
pub fn vq_loss<F: Scalar>(
    tape: &mut Tape<F>,
    x: Var,
    x_hat: Var,
    z_e: Var,
    z_q: Var,
    beta: F,
) -> Result<VqLossVars> {
    let reconstruction = tape.mse(x_hat, x)?;
    let ze_const = tape.detach(z_e);
    let zq_const = tape.detach(z_q);
    let codebook = tape.mse(z_q, ze_const)?;
    let commit_raw = tape.mse(z_e, zq_const)?;
    let commitment = tape.scale(commit_raw, beta);
    let partial = tape.add(reconstruction, codebook);
    let total = tape.add(partial, commitment);
    Ok(VqLossVars { reconstruction, codebook, commitment, total })
}

#[derive(Debug, Clone)]
pub struct VqVae<F: Scalar = f32> {
    pub hyper: HyperParams,
    pub encoder: Stack<F>,
    pub decoder: Stack<F>,
    pub codebook: CodebookState<F>,
}

/// Handles into one recorded training forward.
pub struct VqForward {
    pub x: Var,
    pub z_e: Var,
    pub z_q: Var,
    pub decoder_input: Var,
    pub x_hat: Var,
    pub indices: Vec<usize>,
    pub param_vars: Vec<Var>,
}

impl<F: Scalar> VqVae<F> {
    pub fn new(hyper: HyperParams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = build_encoder(&hyper, &mut rng)?;
        let decoder = build_decoder(&hyper, &mut rng)?;
        let codebook = CodebookState::new(hyper.codebook_size, hyper.embed_dim, &mut rng);
        Ok(VqVae { hyper, encoder, decoder, codebook })
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.encoder.for_each_param("encoder", f);
        self.decoder.for_each_param("decoder", f);
        f("codebook.embeddings".into(), &mut self.codebook.embeddings);
    }

    pub fn for_each_buffer(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.encoder.for_each_buffer("encoder", f);
        self.decoder.for_each_buffer("decoder", f);
    }

    /// Trainable scalars: conv weights and biases, batchnorm affine, codebook.
    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count() + self.codebook.embeddings.numel()
    }

    /// Records the full training forward on the tape. Straight-through wiring:
    /// the decoder consumes z_q values while gradients flow back into z_e.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<F>,
        batch: &Tensor<F>,
    ) -> Result<(VqForward, Vec<PendingStats<F>>, Vec<PendingStats<F>>)> {
        let mut param_vars = Vec::new();
        let x = tape.constant(batch.clone());
        let (z_e, enc_stats) =
            self.encoder.forward(tape, x, BatchNormMode::Train, true, &mut param_vars)?;
        let (indices, _) = nearest_codebook_rows(tape.value(z_e), &self.codebook.embeddings);
        self.codebook.record_usage(&indices);
        let mut cb = self.codebook.embeddings.clone();
        cb.requires_grad = true;
        let cb_var = tape.leaf(&cb);
        let zs = tape.shape(z_e).to_vec();
        let z_q = tape.codebook_lookup(cb_var, &indices, zs[0], zs[2])?;
        let decoder_input = tape.straight_through(z_e, z_q);
        let (x_hat, dec_stats) =
            self.decoder.forward(tape, decoder_input, BatchNormMode::Train, true, &mut param_vars)?;
        param_vars.push(cb_var);
        Ok((
            VqForward { x, z_e, z_q, decoder_input, x_hat, indices, param_vars },
            enc_stats,
            dec_stats,
        ))
    }

    /// Eval-mode encode: images [N, 3, I, I] to per-item encoding grids.
    pub fn encode(&self, batch: &Tensor<F>) -> Result<Vec<EncodingGrid>> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let mut pv = Vec::new();
        let (z_e, _) = self.encoder.forward(&mut tape, x, BatchNormMode::Eval, false, &mut pv)?;
        let (indices, _) = nearest_codebook_rows(tape.value(z_e), &self.codebook.embeddings);
        let side = tape.shape(z_e)[2];
        Ok(indices
            .chunks(side * side)
            .map(|c| EncodingGrid::new(c.iter().map(|&i| i as u32).collect(), side).unwrap())
            .collect())
    }

    /// Eval-mode decode: grids back to images, a pure function of
    /// (grid, codebook, decoder weights).
    pub fn decode(&self, grids: &[EncodingGrid]) -> Result<Tensor<F>> {
        let geo = self.hyper.geometry()?;
        let n = grids.len();
        if n == 0 {
            return Err(Error::invalid("decode needs at least one grid"));
        }
        let mut ids = Vec::with_capacity(n * geo.encodings_per_image);
        for grid in grids {
            grid.validate_against(self.hyper.codebook_size, geo.grid_side)?;
            ids.extend(grid.indices.iter().map(|&i| i as usize));
        }
        let mut tape = Tape::new();
        let cb = tape.constant(self.codebook.embeddings.clone());
        let z_q = tape.codebook_lookup(cb, &ids, n, geo.grid_side)?;
        let mut pv = Vec::new();
        let (x_hat, _) = self.decoder.forward(&mut tape, z_q, BatchNormMode::Eval, false, &mut pv)?;
        Ok(tape.value(x_hat).clone())
    }

    /// decode(encode(x)): the model's eval-mode reconstruction path.
    pub fn reconstruct(&self, batch: &Tensor<F>) -> Result<(Tensor<F>, Vec<EncodingGrid>)> {
        let grids = self.encode(batch)?;
        let x_hat = self.decode(&grids)?;
        Ok((x_hat, grids))
    }

    /// exp(entropy) of usage frequencies; 1 = collapse, K = uniform.
    pub fn codebook_perplexity(&self) -> f64 {
        let total: u64 = self.codebook.usage_counts.iter().sum();
        if total == 0 {
            return 1.0;
        }
        let mut entropy = 0.0;
        for &c in &self.codebook.usage_counts {
            if c > 0 {
                let p = c as f64 / total as f64;
                entropy -= p * p.ln();
            }
        }
        entropy.exp()
    }
}
