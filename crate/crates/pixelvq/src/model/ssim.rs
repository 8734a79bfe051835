//! SSIM expressed in tape ops so it can serve as a differentiable loss term.
//! Same configuration as the metric: 11x11 Gaussian window, sigma 1.5,
//! C1 = 0.01^2, C2 = 0.03^2 on unit dynamic range, valid windows only.

use crate::error::Result;
use crate::graph::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Normalized 2-D Gaussian window as a [1, 1, w, w] kernel.
pub fn gaussian_window<F: Scalar>(window: usize, sigma: f64) -> Tensor<F> {
    let half = (window - 1) as f64 / 2.0;
    let mut one_d = vec![0f64; window];
    for (i, v) in one_d.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-(x * x) / (2.0 * sigma * sigma)).exp();
    }
    let norm: f64 = one_d.iter().sum();
    let mut data = Vec::with_capacity(window * window);
    for y in 0..window {
        for x in 0..window {
            data.push(F::from_f64(one_d[y] * one_d[x] / (norm * norm)));
        }
    }
    Tensor::from_vec(&[1, 1, window, window], data).unwrap()
}

/// Mean SSIM between two [N, C, H, W] batches as a scalar node. Channels are
/// folded into the batch axis so one single-channel Gaussian kernel filters
/// everything.
pub fn ssim_mean<F: Scalar>(tape: &mut Tape<F>, a: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let a = tape.reshape(a, &[n * c, 1, h, w]);
    let b = tape.reshape(b, &[n * c, 1, h, w]);
    let kernel = tape.constant(gaussian_window::<F>(WINDOW, SIGMA));

    let mu_a = tape.conv2d(a, kernel, None, 1, 0)?;
    let mu_b = tape.conv2d(b, kernel, None, 1, 0)?;
    let aa = tape.mul(a, a);
    let bb = tape.mul(b, b);
    let ab = tape.mul(a, b);
    let e_aa = tape.conv2d(aa, kernel, None, 1, 0)?;
    let e_bb = tape.conv2d(bb, kernel, None, 1, 0)?;
    let e_ab = tape.conv2d(ab, kernel, None, 1, 0)?;

    let mu_a2 = tape.mul(mu_a, mu_a);
    let mu_b2 = tape.mul(mu_b, mu_b);
    let mu_ab = tape.mul(mu_a, mu_b);
    let var_a = tape.sub(e_aa, mu_a2);
    let var_b = tape.sub(e_bb, mu_b2);
    let cov = tape.sub(e_ab, mu_ab);

    let c1 = F::from_f64(C1);
    let c2 = F::from_f64(C2);
    let two = F::from_f64(2.0);
    let t1 = tape.scale(mu_ab, two);
    let t1 = tape.add_scalar(t1, c1);
    let t2 = tape.scale(cov, two);
    let t2 = tape.add_scalar(t2, c2);
    let num = tape.mul(t1, t2);
    let d1 = tape.add(mu_a2, mu_b2);
    let d1 = tape.add_scalar(d1, c1);
    let d2 = tape.add(var_a, var_b);
    let d2 = tape.add_scalar(d2, c2);
    let den = tape.mul(d1, d2);
    let map = tape.div(num, den);
    Ok(tape.mean(map))
}
