//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-parameter-set optimizer state. Moment buffers are allocated lazily on
/// the first step so the state can be built before shapes are known.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar = f32> {
    pub step: u64,
    pub learning_rate: F,
    pub beta1: F,
    pub beta2: F,
    pub epsilon: F,
    pub first_moment: Vec<Vec<F>>,
    pub second_moment: Vec<Vec<F>>,
}

impl<F: Scalar> AdamState<F> {
    /// Conventional defaults: beta1 0.9, beta2 0.999, epsilon 1e-8.
    pub fn new(learning_rate: F) -> Self {
        AdamState {
            step: 0,
            learning_rate,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            epsilon: F::from_f64(1e-8),
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }
}

impl<F: Scalar> AdamState<F> {
    /// Advances the shared step counter. Call once per batch, before the
    /// per-tensor updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates parameter tensor `i` in place from its grad slot, allocating
    /// the moment buffers on first sight.
    pub fn update_param(&mut self, i: usize, p: &mut Tensor<F>) -> Result<()> {
        let n = p.numel();
        while self.first_moment.len() <= i {
            self.first_moment.push(Vec::new());
            self.second_moment.push(Vec::new());
        }
        if self.first_moment[i].is_empty() {
            self.first_moment[i] = vec![F::ZERO; n];
            self.second_moment[i] = vec![F::ZERO; n];
        }
        if self.first_moment[i].len() != n {
            return Err(Error::dim(0, format!(
                "moment buffer {} has {} elements, parameter has {}",
                i,
                self.first_moment[i].len(),
                n
            )));
        }
        let grad = p
            .grad
            .take()
            .ok_or_else(|| Error::invalid(format!("parameter {} has no gradient", i)))?;
        if grad.len() != n {
            return Err(Error::dim(0, format!("gradient length {} != parameter {}", grad.len(), n)));
        }
        let t = self.step as i32;
        let bc1 = F::ONE - self.beta1.powi(t);
        let bc2 = F::ONE - self.beta2.powi(t);
        let m = &mut self.first_moment[i];
        let v = &mut self.second_moment[i];
        let data = p.data_mut();
        for j in 0..n {
            let g = grad[j];
            m[j] = self.beta1 * m[j] + (F::ONE - self.beta1) * g;
            v[j] = self.beta2 * v[j] + (F::ONE - self.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] = data[j] - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// One Adam update over a parameter list. Every tensor must carry a populated
/// grad slot; moment buffers must match parameter shapes.
pub fn adam_step<F: Scalar>(params: &mut [&mut Tensor<F>], state: &mut AdamState<F>) -> Result<()> {
    if !state.first_moment.is_empty() && state.first_moment.len() != params.len() {
        return Err(Error::dim(0, format!(
            "optimizer tracks {} parameter tensors, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    state.begin_step();
    for (i, p) in params.iter_mut().enumerate() {
        state.update_param(i, p)?;
    }
    Ok(())
}
