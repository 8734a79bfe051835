//! Central finite-difference verification harness.
//!
//! Runs in the f64 shadow: the graph under test is rebuilt per probe and the
//! forward value alone drives the numeric derivative, so the check stays
//! independent of the backward implementation it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Coordinates probed per parameter tensor (sampled without replacement).
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-4, tolerance: 1e-3, coords_per_tensor: 24, seed: 0x9d_c0de }
    }
}

#[derive(Debug)]
pub struct GradReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

fn rel_error(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff < 1e-9 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(1e-4)
}

impl GradCheck {
    /// `build` assembles the graph from leaves (one per parameter, in order)
    /// and returns the scalar loss node.
    pub fn check<B>(&self, params: &[Tensor<f64>], build: B) -> Result<GradReport>
    where
        B: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        // Analytic pass.
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = params
            .iter()
            .map(|p| {
                let mut p = p.clone();
                p.requires_grad = true;
                tape.leaf(&p)
            })
            .collect();
        let loss = build(&mut tape, &vars);
        if tape.value(loss).numel() != 1 {
            return Err(Error::invalid("gradcheck loss must be scalar"));
        }
        tape.backward(loss)?;
        let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

        let eval = |theta: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = theta.iter().map(|p| tape.leaf(p)).collect();
            let loss = build(&mut tape, &vars);
            tape.value(loss).item()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<Tensor<f64>> = params.to_vec();
        let mut checked = 0usize;
        let mut max_rel: f64 = 0.0;
        for (pi, p) in params.iter().enumerate() {
            let n = p.numel();
            let mut coords: Vec<usize> = (0..n).collect();
            if n > self.coords_per_tensor {
                for i in 0..self.coords_per_tensor {
                    let j = rng.random_range(i..n);
                    coords.swap(i, j);
                }
                coords.truncate(self.coords_per_tensor);
            }
            for &ci in &coords {
                let orig = work[pi].data()[ci];
                work[pi].data_mut()[ci] = orig + self.step;
                let up = eval(&work);
                work[pi].data_mut()[ci] = orig - self.step;
                let down = eval(&work);
                work[pi].data_mut()[ci] = orig;
                let fd = (up - down) / (2.0 * self.step);
                let an = analytic[pi].data()[ci];
                let rel = rel_error(an, fd);
                if rel > self.tolerance {
                    return Err(Error::invalid(format!(
                        "gradient mismatch: param {} coord {}: analytic {:.6e} vs finite-diff {:.6e} (rel {:.3e})",
                        pi, ci, an, fd, rel
                    )));
                }
                max_rel = max_rel.max(rel);
                checked += 1;
            }
        }
        Ok(GradReport { coords_checked: checked, max_rel_error: max_rel })
    }
}

/// Random tensor with entries in [-1, 1] shifted away from zero, so kinked
/// activations (relu) stay differentiable at every probe point.
pub fn smooth_random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.15..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}
