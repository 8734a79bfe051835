//! Gated conditional autoregressive prior over encoding grids.
//!
//! Single-stack masked convolutions: layer 1 masks the center tap (type A),
//! later layers keep it (type B), so logits at a raster position depend only
//! on strictly earlier positions and the conditioning attributes. Each gated
//! layer computes tanh(Wf*x + Vf h) * sigmoid(Wg*x + Vg h) with a residual
//! connection from layer 2 on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::corpus::{Corpus, Split};
use crate::data::epoch::build_epoch;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::model::training::TrainConfig;
use crate::model::vqvae::{EncodingGrid, VqVae};
use crate::optim::AdamState;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskType {
    A,
    B,
}

/// 0/1 mask over a [c_out, c_in, k, k] kernel: raster-past taps only; type A
/// zeroes the center, type B keeps it.
pub fn causal_mask<F: Scalar>(c_out: usize, c_in: usize, kernel: usize, mask: MaskType) -> Result<Tensor<F>> {
    if kernel % 2 == 0 {
        return Err(Error::invalid(format!("masked convolution needs an odd kernel, got {kernel}")));
    }
    let center = kernel / 2;
    let mut data = vec![F::ZERO; c_out * c_in * kernel * kernel];
    for co in 0..c_out {
        for ci in 0..c_in {
            for ki in 0..kernel {
                for kj in 0..kernel {
                    let keep = ki < center
                        || (ki == center && kj < center)
                        || (ki == center && kj == center && mask == MaskType::B);
                    if keep {
                        data[((co * c_in + ci) * kernel + ki) * kernel + kj] = F::ONE;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c_out, c_in, kernel, kernel], data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub n_layers: usize,
    pub n_filters: usize,
    pub kernel: usize,
    /// Vocabulary of grid values; must match the paired autoencoder's K.
    pub codebook_size: usize,
    /// (shape, type1, type2) vocabulary sizes.
    pub condition_dims: [usize; 3],
    /// Learned embedding width per attribute.
    pub embed_width: usize,
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("kernel must be odd"));
        }
        if self.n_layers == 0 {
            return Err(Error::invalid("need at least one gated layer"));
        }
        if self.codebook_size < 2 {
            return Err(Error::invalid("codebook size must be >= 2"));
        }
        Ok(())
    }

    pub fn cond_width(&self) -> usize {
        3 * self.embed_width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub shape_id: usize,
    pub type1_id: usize,
    pub type2_id: usize,
}

impl ConditionVector {
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        for (&id, &limit) in [self.shape_id, self.type1_id, self.type2_id].iter().zip(dims.iter()) {
            if id >= limit {
                return Err(Error::IndexRange { index: id, limit });
            }
        }
        Ok(())
    }

    pub fn as_ids(&self) -> [usize; 3] {
        [self.shape_id, self.type1_id, self.type2_id]
    }
}

#[derive(Debug, Clone)]
struct GatedLayer<F: Scalar> {
    w_f: Tensor<F>,
    b_f: Tensor<F>,
    w_g: Tensor<F>,
    b_g: Tensor<F>,
    cond_f: Tensor<F>,
    cond_g: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct PixelCnn<F: Scalar = f32> {
    pub config: PriorConfig,
    embed_shape: Tensor<F>,
    embed_type1: Tensor<F>,
    embed_type2: Tensor<F>,
    layers: Vec<GatedLayer<F>>,
    /// One mask per gated layer; a test fixture may deliberately corrupt one.
    masks: Vec<Tensor<F>>,
    head_w1: Tensor<F>,
    head_b1: Tensor<F>,
    head_w2: Tensor<F>,
    head_b2: Tensor<F>,
}

fn uniform_fan_in<F: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl<F: Scalar> PixelCnn<F> {
    pub fn new(config: PriorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.codebook_size;
        let nf = config.n_filters;
        let kw = config.kernel;
        let e = config.embed_width;
        let embed_shape = uniform_fan_in(&[config.condition_dims[0].max(1), e], &mut rng);
        let embed_type1 = uniform_fan_in(&[config.condition_dims[1].max(1), e], &mut rng);
        let embed_type2 = uniform_fan_in(&[config.condition_dims[2].max(1), e], &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        let mut masks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let c_in = if l == 0 { k } else { nf };
            let mask = if l == 0 { MaskType::A } else { MaskType::B };
            layers.push(GatedLayer {
                w_f: uniform_fan_in(&[nf, c_in, kw, kw], &mut rng),
                b_f: Tensor::zeros(&[nf]),
                w_g: uniform_fan_in(&[nf, c_in, kw, kw], &mut rng),
                b_g: Tensor::zeros(&[nf]),
                cond_f: uniform_fan_in(&[nf, config.cond_width()], &mut rng),
                cond_g: uniform_fan_in(&[nf, config.cond_width()], &mut rng),
            });
            masks.push(causal_mask(nf, c_in, kw, mask)?);
        }
        Ok(PixelCnn {
            config,
            embed_shape,
            embed_type1,
            embed_type2,
            layers,
            masks,
            head_w1: uniform_fan_in(&[nf, nf, 1, 1], &mut rng),
            head_b1: Tensor::zeros(&[nf]),
            // zero head output: a fresh prior is exactly uniform over K
            head_w2: Tensor::zeros(&[k, nf, 1, 1]),
            head_b2: Tensor::zeros(&[k]),
        })
    }

    /// Negative control for the audit: restores the center tap in layer 1.
    pub fn break_layer0_mask_for_fixture(&mut self) {
        let shape = self.masks[0].shape().to_vec();
        let (c_in, kernel) = (shape[1], shape[2]);
        let center = kernel / 2;
        let data = self.masks[0].data_mut();
        for co in 0..shape[0] {
            for ci in 0..c_in {
                data[((co * c_in + ci) * kernel + center) * kernel + center] = F::ONE;
            }
        }
    }

    pub fn for_each_param(&mut self, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f("embed.shape".into(), &mut self.embed_shape);
        f("embed.type1".into(), &mut self.embed_type1);
        f("embed.type2".into(), &mut self.embed_type2);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            f(format!("gated.{l}.w_f"), &mut layer.w_f);
            f(format!("gated.{l}.b_f"), &mut layer.b_f);
            f(format!("gated.{l}.w_g"), &mut layer.w_g);
            f(format!("gated.{l}.b_g"), &mut layer.b_g);
            f(format!("gated.{l}.cond_f"), &mut layer.cond_f);
            f(format!("gated.{l}.cond_g"), &mut layer.cond_g);
        }
        f("head.w1".into(), &mut self.head_w1);
        f("head.b1".into(), &mut self.head_b1);
        f("head.w2".into(), &mut self.head_w2);
        f("head.b2".into(), &mut self.head_b2);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut m = self.clone();
        m.for_each_param(&mut |_, t| n += t.numel());
        n
    }

    fn one_hot(&self, ids: &[usize], n: usize, side: usize) -> Result<Tensor<F>> {
        let k = self.config.codebook_size;
        let hw = side * side;
        if ids.len() != n * hw {
            return Err(Error::dim(0, format!("expected {} grid values, got {}", n * hw, ids.len())));
        }
        let mut data = vec![F::ZERO; n * k * hw];
        for ni in 0..n {
            for p in 0..hw {
                let id = ids[ni * hw + p];
                if id >= k {
                    return Err(Error::IndexRange { index: id, limit: k });
                }
                data[(ni * k + id) * hw + p] = F::ONE;
            }
        }
        Tensor::from_vec(&[n, k, side, side], data)
    }

    /// Records the forward pass; `taps` receives each gated layer's output
    /// for the causality audit.
    #[allow(clippy::too_many_arguments)]
    fn forward_impl(
        &self,
        tape: &mut Tape<F>,
        ids: &[usize],
        n: usize,
        side: usize,
        conds: &[[usize; 3]],
        train: bool,
        taps: Option<&mut Vec<Var>>,
    ) -> Result<(Var, Vec<Var>)> {
        if conds.len() != n {
            return Err(Error::dim(0, format!("expected {n} condition rows, got {}", conds.len())));
        }
        let dims = self.config.condition_dims;
        for c in conds {
            for (axis, (&id, &limit)) in c.iter().zip(dims.iter()).enumerate() {
                if id >= limit {
                    return Err(Error::Dimension {
                        axis,
                        detail: format!("condition id {id} out of vocabulary {limit}"),
                    });
                }
            }
        }
        let mut param_vars = Vec::new();
        let leaf = |tape: &mut Tape<F>, t: &Tensor<F>, vars: &mut Vec<Var>| {
            let mut t = t.clone();
            t.requires_grad = train;
            let v = tape.leaf(&t);
            vars.push(v);
            v
        };
        // conditioning vector h = concat of the three attribute embeddings
        let es = leaf(tape, &self.embed_shape, &mut param_vars);
        let e1 = leaf(tape, &self.embed_type1, &mut param_vars);
        let e2 = leaf(tape, &self.embed_type2, &mut param_vars);
        let shape_ids: Vec<usize> = conds.iter().map(|c| c[0]).collect();
        let t1_ids: Vec<usize> = conds.iter().map(|c| c[1]).collect();
        let t2_ids: Vec<usize> = conds.iter().map(|c| c[2]).collect();
        let h_s = tape.embed_rows(es, &shape_ids)?;
        let h_1 = tape.embed_rows(e1, &t1_ids)?;
        let h_2 = tape.embed_rows(e2, &t2_ids)?;
        let h01 = tape.concat_cols(h_s, h_1);
        let h = tape.concat_cols(h01, h_2);

        let pad = self.config.kernel / 2;
        let mut x = tape.constant(self.one_hot(ids, n, side)?);
        let mut taps = taps;
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = tape.constant(self.masks[l].clone());
            let wf = leaf(tape, &layer.w_f, &mut param_vars);
            let bf = leaf(tape, &layer.b_f, &mut param_vars);
            let wg = leaf(tape, &layer.w_g, &mut param_vars);
            let bg = leaf(tape, &layer.b_g, &mut param_vars);
            let cf = leaf(tape, &layer.cond_f, &mut param_vars);
            let cg = leaf(tape, &layer.cond_g, &mut param_vars);
            let wf_masked = tape.mul(wf, mask);
            let wg_masked = tape.mul(wg, mask);
            let xf = tape.conv2d(x, wf_masked, Some(bf), 1, pad)?;
            let xg = tape.conv2d(x, wg_masked, Some(bg), 1, pad)?;
            let hf = tape.linear(h, cf, None);
            let hg = tape.linear(h, cg, None);
            let xf = tape.item_channel_bias(xf, hf);
            let xg = tape.item_channel_bias(xg, hg);
            let f = tape.tanh(xf);
            let g = tape.sigmoid(xg);
            let gated = tape.mul(f, g);
            x = if l == 0 { gated } else { tape.add(x, gated) };
            if let Some(t) = taps.as_deref_mut() {
                t.push(x);
            }
        }
        let w1 = leaf(tape, &self.head_w1, &mut param_vars);
        let b1 = leaf(tape, &self.head_b1, &mut param_vars);
        let w2 = leaf(tape, &self.head_w2, &mut param_vars);
        let b2 = leaf(tape, &self.head_b2, &mut param_vars);
        let r = tape.relu(x);
        let y = tape.conv2d(r, w1, Some(b1), 1, 0)?;
        let r2 = tape.relu(y);
        let logits = tape.conv2d(r2, w2, Some(b2), 1, 0)?;
        Ok((logits, param_vars))
    }

    /// Logits [N, K, G, G] for a batch of grids under their conditions.
    pub fn logits(
        &self,
        tape: &mut Tape<F>,
        ids: &[usize],
        n: usize,
        side: usize,
        conds: &[[usize; 3]],
        train: bool,
    ) -> Result<(Var, Vec<Var>)> {
        self.forward_impl(tape, ids, n, side, conds, train, None)
    }

    /// Raster-order ancestral sampling. Temperature > 0 samples from
    /// softmax(logits / T); temperature <= 0 is the greedy argmax limit.
    pub fn sample(
        &self,
        side: usize,
        cond: ConditionVector,
        temperature: f64,
        seed: u64,
    ) -> Result<EncodingGrid> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.config.codebook_size;
        let mut ids = vec![0usize; side * side];
        let conds = [cond.as_ids()];
        for p in 0..side * side {
            let mut tape = Tape::new();
            let (logits, _) = self.forward_impl(&mut tape, &ids, 1, side, &conds, false, None)?;
            let ld = tape.value(logits).data();
            let hw = side * side;
            let mut row: Vec<f64> = (0..k).map(|ki| ld[ki * hw + p].to_f64()).collect();
            let choice = if temperature > 0.0 {
                for v in &mut row {
                    *v /= temperature;
                }
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                let u: f64 = rng.random_range(0.0..1.0);
                let mut acc = 0.0;
                let mut picked = k - 1;
                for (i, &e) in exps.iter().enumerate() {
                    acc += e / z;
                    if u < acc {
                        picked = i;
                        break;
                    }
                }
                picked
            } else {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for (i, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = i;
                    }
                }
                best
            };
            ids[p] = choice;
        }
        EncodingGrid::new(ids.iter().map(|&i| i as u32).collect(), side)
    }
}

/// One causality violation: perturbing `perturbed` changed an output at
/// `affected` (raster index <= perturbed) in `stage`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalityViolation {
    pub stage: String,
    pub perturbed: usize,
    pub affected: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub grid_side: usize,
    pub positions_audited: usize,
    pub violations: Vec<CausalityViolation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Perturbs every raster position of a random grid and checks, per gated
/// layer and for the final logits, that nothing at or before the perturbed
/// position changed. Eval mode is deterministic, so equality is exact.
pub fn causality_audit<F: Scalar>(
    prior: &PixelCnn<F>,
    side: usize,
    seed: u64,
) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = prior.config.codebook_size;
    let hw = side * side;
    let base_ids: Vec<usize> = (0..hw).map(|_| rng.random_range(0..k)).collect();
    let cond = [[0usize, 0, 0]];

    let run = |ids: &[usize]| -> Result<(Vec<Vec<F>>, Vec<F>)> {
        let mut tape = Tape::new();
        let mut taps = Vec::new();
        let (logits, _) = prior.forward_impl(&mut tape, ids, 1, side, &cond, false, Some(&mut taps))?;
        let tap_values: Vec<Vec<F>> = taps.iter().map(|&v| tape.value(v).data().to_vec()).collect();
        Ok((tap_values, tape.value(logits).data().to_vec()))
    };
    let (base_taps, base_logits) = run(&base_ids)?;

    let mut violations = Vec::new();
    for q in 0..hw {
        let mut poked = base_ids.clone();
        poked[q] = (poked[q] + 1) % k;
        let (taps, logits) = run(&poked)?;
        for (l, (tap, base_tap)) in taps.iter().zip(&base_taps).enumerate() {
            let channels = tap.len() / hw;
            'outer: for p in 0..=q {
                for c in 0..channels {
                    if tap[c * hw + p] != base_tap[c * hw + p] {
                        violations.push(CausalityViolation {
                            stage: format!("gated layer {l}"),
                            perturbed: q,
                            affected: p,
                        });
                        break 'outer;
                    }
                }
            }
        }
        let channels = logits.len() / hw;
        'louter: for p in 0..=q {
            for c in 0..channels {
                if logits[c * hw + p] != base_logits[c * hw + p] {
                    violations.push(CausalityViolation {
                        stage: "logits".into(),
                        perturbed: q,
                        affected: p,
                    });
                    break 'louter;
                }
            }
        }
    }
    Ok(AuditReport { grid_side: side, positions_audited: hw, violations })
}

pub struct PriorTrainer<F: Scalar = f32> {
    pub model: PixelCnn<F>,
    pub adam: AdamState<F>,
}

impl<F: Scalar> PriorTrainer<F> {
    pub fn new(model: PixelCnn<F>, learning_rate: F) -> Self {
        PriorTrainer { model, adam: AdamState::new(learning_rate) }
    }

    /// One step of K-way cross-entropy over all grid positions.
    pub fn step(&mut self, ids: &[usize], n: usize, side: usize, conds: &[[usize; 3]]) -> Result<f64> {
        let mut tape = Tape::new();
        let (logits, param_vars) = self.model.logits(&mut tape, ids, n, side, conds, true)?;
        let loss = tape.cross_entropy(logits, ids)?;
        let loss_value = tape.value(loss).item().to_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("prior training loss".into()));
        }
        tape.backward(loss)?;
        let adam = &mut self.adam;
        adam.begin_step();
        let mut idx = 0usize;
        let mut failure: Option<Error> = None;
        self.model.for_each_param(&mut |_, p| {
            if failure.is_some() {
                return;
            }
            tape.write_grad(param_vars[idx], p);
            if let Err(e) = adam.update_param(idx, p) {
                failure = Some(e);
            }
            idx += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        debug_assert_eq!(idx, param_vars.len());
        Ok(loss_value)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PriorEpochRecord {
    pub epoch: usize,
    pub cross_entropy: f64,
}

pub struct PriorTrainOutcome {
    pub model: PixelCnn<f32>,
    pub curve: Vec<PriorEpochRecord>,
}

/// Encodes the training stream with the frozen autoencoder and fits the
/// prior on the resulting grids + attribute conditions.
pub fn train_prior(
    vqvae: &VqVae<f32>,
    corpus: &Corpus,
    config: PriorConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<PriorTrainOutcome> {
    if config.codebook_size != vqvae.hyper.codebook_size {
        return Err(Error::Incompatible(format!(
            "prior K={} but autoencoder K={}",
            config.codebook_size, vqvae.hyper.codebook_size
        )));
    }
    let geo = vqvae.hyper.geometry()?;
    let model = PixelCnn::<f32>::new(config, seed)?;
    let mut trainer = PriorTrainer::new(model, train.learning_rate);
    let mut curve = Vec::new();
    for epoch in 0..train.epochs {
        let plan = build_epoch(corpus, Split::Train, vqvae.hyper.input_size, train.batch_size, seed, epoch as u64)?;
        let n_batches = match train.max_steps_per_epoch {
            Some(cap) => plan.n_batches().min(cap),
            None => plan.n_batches(),
        };
        let mut sum = 0.0;
        for b in 0..n_batches {
            let batch = plan.batch(corpus, b)?;
            let grids = vqvae.encode(&batch.pixels)?;
            let mut ids = Vec::with_capacity(grids.len() * geo.encodings_per_image);
            for g in &grids {
                ids.extend(g.indices.iter().map(|&i| i as usize));
            }
            let loss = trainer
                .step(&ids, grids.len(), geo.grid_side, &batch.attributes)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::NonFinite(format!(
                        "prior loss diverged at epoch {epoch} batch {b} (learning rate {})",
                        train.learning_rate
                    )),
                    other => other,
                })?;
            sum += loss;
        }
        curve.push(PriorEpochRecord { epoch, cross_entropy: sum / n_batches as f64 });
    }
    Ok(PriorTrainOutcome { model: trainer.model, curve })
}
