//! Layer stacks assembled from the tape ops, with parameter iteration for
//! the optimizer and the checkpoint container.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{ActKind, BatchNormMode, BatchStats, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Conv2dLayer<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvT2dLayer<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2dLayer<F: Scalar> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Layer<F: Scalar> {
    Conv(Conv2dLayer<F>),
    ConvT(ConvT2dLayer<F>),
    Norm(BatchNorm2dLayer<F>),
    Act(ActKind),
}

/// He-style uniform fan-in init: bound = 1/sqrt(fan_in).
fn init_weight<F: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    let fan_in: usize = shape[1] * shape[2..].iter().product::<usize>().max(1);
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

impl<F: Scalar> Conv2dLayer<F> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv2dLayer {
            weight: init_weight(&[c_out, c_in, kernel, kernel], rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
            padding: 0,
        }
    }
}

impl<F: Scalar> ConvT2dLayer<F> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvT2dLayer {
            weight: init_weight(&[c_in, c_out, kernel, kernel], rng),
            bias: Tensor::zeros(&[c_out]),
            stride,
        }
    }
}

impl<F: Scalar> BatchNorm2dLayer<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2dLayer {
            gamma: Tensor::full(&[channels], F::ONE),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], F::ONE),
            momentum: 0.1,
        }
    }
}

/// Captured train-mode statistics, folded into running buffers after the
/// backward pass so a frozen model stays immutable during forward.
#[derive(Debug, Clone)]
pub struct PendingStats<F: Scalar> {
    pub layer_index: usize,
    pub stats: BatchStats<F>,
}

#[derive(Debug, Clone, Default)]
pub struct Stack<F: Scalar> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Scalar> Stack<F> {
    /// Runs the stack; `param_vars` collects one tape var per trainable tensor
    /// in iteration order (matching `for_each_param`).
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        mut x: Var,
        mode: BatchNormMode,
        train_params: bool,
        param_vars: &mut Vec<Var>,
    ) -> Result<(Var, Vec<PendingStats<F>>)> {
        let mut pending = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(conv) => {
                    let (mut w, mut b) = (conv.weight.clone(), conv.bias.clone());
                    w.requires_grad = train_params;
                    b.requires_grad = train_params;
                    let wv = tape.leaf(&w);
                    let bv = tape.leaf(&b);
                    param_vars.push(wv);
                    param_vars.push(bv);
                    x = tape.conv2d(x, wv, Some(bv), conv.stride, conv.padding)?;
                }
                Layer::ConvT(conv) => {
                    let (mut w, mut b) = (conv.weight.clone(), conv.bias.clone());
                    w.requires_grad = train_params;
                    b.requires_grad = train_params;
                    let wv = tape.leaf(&w);
                    let bv = tape.leaf(&b);
                    param_vars.push(wv);
                    param_vars.push(bv);
                    x = tape.conv_transpose2d(x, wv, Some(bv), conv.stride)?;
                }
                Layer::Norm(norm) => {
                    let (mut g, mut b) = (norm.gamma.clone(), norm.beta.clone());
                    g.requires_grad = train_params;
                    b.requires_grad = train_params;
                    let gv = tape.leaf(&g);
                    let bv = tape.leaf(&b);
                    param_vars.push(gv);
                    param_vars.push(bv);
                    let running = (norm.running_mean.data(), norm.running_var.data());
                    let (y, stats) = tape.batchnorm2d(x, gv, bv, mode, Some(running))?;
                    if let Some(stats) = stats {
                        pending.push(PendingStats { layer_index: li, stats });
                    }
                    x = y;
                }
                Layer::Act(kind) => {
                    x = tape.activation(*kind, x);
                }
            }
        }
        Ok((x, pending))
    }

    /// running = (1 - momentum) * running + momentum * batch.
    pub fn apply_batch_stats(&mut self, pending: &[PendingStats<F>]) {
        for p in pending {
            if let Layer::Norm(norm) = &mut self.layers[p.layer_index] {
                let m = F::from_f64(norm.momentum);
                let one_m = F::ONE - m;
                for (r, &b) in norm.running_mean.data_mut().iter_mut().zip(&p.stats.mean) {
                    *r = one_m * *r + m * b;
                }
                for (r, &b) in norm.running_var.data_mut().iter_mut().zip(&p.stats.var) {
                    *r = one_m * *r + m * b;
                }
            }
        }
    }

    /// Trainable tensors in deterministic order.
    pub fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    f(format!("{prefix}.{li}.conv.weight"), &mut c.weight);
                    f(format!("{prefix}.{li}.conv.bias"), &mut c.bias);
                }
                Layer::ConvT(c) => {
                    f(format!("{prefix}.{li}.convt.weight"), &mut c.weight);
                    f(format!("{prefix}.{li}.convt.bias"), &mut c.bias);
                }
                Layer::Norm(nm) => {
                    f(format!("{prefix}.{li}.norm.gamma"), &mut nm.gamma);
                    f(format!("{prefix}.{li}.norm.beta"), &mut nm.beta);
                }
                Layer::Act(_) => {}
            }
        }
    }

    /// Non-trainable state (batchnorm running statistics).
    pub fn for_each_buffer(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        for (li, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::Norm(nm) = layer {
                f(format!("{prefix}.{li}.norm.running_mean"), &mut nm.running_mean);
                f(format!("{prefix}.{li}.norm.running_var"), &mut nm.running_var);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => n += c.weight.numel() + c.bias.numel(),
                Layer::ConvT(c) => n += c.weight.numel() + c.bias.numel(),
                Layer::Norm(nm) => n += nm.gamma.numel() + nm.beta.numel(),
                Layer::Act(_) => {}
            }
        }
        n
    }

    /// Structural fingerprint used by the ablation-identity test.
    pub fn describe(&self) -> Vec<String> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => format!(
                    "conv {:?} stride {} pad {}",
                    c.weight.shape(),
                    c.stride,
                    c.padding
                ),
                Layer::ConvT(c) => format!("convt {:?} stride {}", c.weight.shape(), c.stride),
                Layer::Norm(nm) => format!("batchnorm [{}]", nm.gamma.numel()),
                Layer::Act(k) => format!("act {:?}", k),
            })
            .collect()
    }
}
