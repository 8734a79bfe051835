//! Finite-difference checks for every differentiable op, plus the direct-loop
//! convolution oracle and the conv / transposed-conv adjoint identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pixelvq::gradcheck::{smooth_random, GradCheck};
use pixelvq::graph::{BatchNormMode, Tape, Var};
use pixelvq::tensor::Tensor;

fn checker() -> GradCheck {
    GradCheck::default()
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..5 {
        let shape = [2 + trial % 3, 3];
        let a = smooth_random(&shape, &mut rng);
        let b = smooth_random(&shape, &mut rng);
        let target = smooth_random(&shape, &mut rng);
        checker()
            .check(&[a, b], |tape, vars| {
                let sum = tape.add(vars[0], vars[1]);
                let diff = tape.sub(vars[0], vars[1]);
                let prod = tape.mul(sum, diff);
                let quot = tape.div(prod, vars[1]);
                let scaled = tape.scale(quot, 0.7);
                let shifted = tape.add_scalar(scaled, 0.3);
                let t = tape.constant(target.clone());
                tape.mse(shifted, t).unwrap()
            })
            .unwrap();
    }
}

#[test]
fn activations_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let x = smooth_random(&[4, 5], &mut rng);
        let target = smooth_random(&[4, 5], &mut rng);
        checker()
            .check(&[x], |tape, vars| {
                let r = tape.relu(vars[0]);
                let s = tape.sigmoid(r);
                let t = tape.tanh(s);
                let e = tape.exp(t);
                let tg = tape.constant(target.clone());
                tape.mse(e, tg).unwrap()
            })
            .unwrap();
    }
}

#[test]
fn conv2d_matches_finite_differences_on_varied_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = [
        // (n, c_in, h, w, c_out, k, stride, padding)
        (1, 1, 5, 5, 2, 3, 1, 0),
        (2, 2, 6, 6, 3, 2, 2, 0),
        (1, 3, 4, 4, 2, 2, 1, 1),
        (2, 1, 7, 5, 1, 3, 2, 1),
        (1, 2, 4, 6, 4, 1, 1, 0),
    ];
    for (n, c_in, h, w, c_out, k, stride, padding) in cases {
        let x = smooth_random(&[n, c_in, h, w], &mut rng);
        let wt = smooth_random(&[c_out, c_in, k, k], &mut rng);
        let b = smooth_random(&[c_out], &mut rng);
        checker()
            .check(&[x, wt, b], |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], Some(vars[2]), stride, padding).unwrap();
                let t = tape.constant(Tensor::zeros(tape.shape(y)));
                tape.mse(y, t).unwrap()
            })
            .unwrap();
    }
}

#[test]
fn conv_transpose2d_matches_finite_differences_on_varied_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cases = [
        // (n, c_in, h, w, c_out, k, stride)
        (1, 1, 3, 3, 2, 2, 2),
        (2, 3, 2, 2, 1, 3, 1),
        (1, 2, 4, 3, 3, 2, 2),
        (2, 2, 3, 4, 2, 1, 1),
        (1, 4, 2, 2, 3, 3, 3),
    ];
    for (n, c_in, h, w, c_out, k, stride) in cases {
        let x = smooth_random(&[n, c_in, h, w], &mut rng);
        let wt = smooth_random(&[c_in, c_out, k, k], &mut rng);
        let b = smooth_random(&[c_out], &mut rng);
        checker()
            .check(&[x, wt, b], |tape, vars| {
                let y = tape.conv_transpose2d(vars[0], vars[1], Some(vars[2]), stride).unwrap();
                let t = tape.constant(Tensor::zeros(tape.shape(y)));
                tape.mse(y, t).unwrap()
            })
            .unwrap();
    }
}

#[test]
fn batchnorm_train_and_eval_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let x = smooth_random(&[4, 3, 2, 2], &mut rng);
        let gamma = smooth_random(&[3], &mut rng);
        let beta = smooth_random(&[3], &mut rng);
        let target = smooth_random(&[4, 3, 2, 2], &mut rng);
        checker()
            .check(&[x.clone(), gamma.clone(), beta.clone()], |tape, vars| {
                let (y, _) = tape
                    .batchnorm2d(vars[0], vars[1], vars[2], BatchNormMode::Train, None)
                    .unwrap();
                let t = tape.constant(target.clone());
                tape.mse(y, t).unwrap()
            })
            .unwrap();
        let rm = vec![0.1, -0.2, 0.05];
        let rv = vec![0.9, 1.1, 0.7];
        checker()
            .check(&[x.clone(), gamma, beta], |tape, vars| {
                let (y, _) = tape
                    .batchnorm2d(vars[0], vars[1], vars[2], BatchNormMode::Eval, Some((&rm, &rv)))
                    .unwrap();
                let t = tape.constant(target.clone());
                tape.mse(y, t).unwrap()
            })
            .unwrap();
    }
}

#[test]
fn batchnorm_normalizes_each_channel_against_direct_statistics() {
    // Oracle: recompute per-channel mean/var of the normalized (pre-affine)
    // values with plain loops.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = smooth_random(&[4, 3, 2, 2], &mut rng);
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(&x);
    let gamma = tape.constant(Tensor::full(&[3], 1.0));
    let beta = tape.constant(Tensor::zeros(&[3]));
    let (y, _) = tape.batchnorm2d(xv, gamma, beta, BatchNormMode::Train, None).unwrap();
    let yd = tape.value(y).data().to_vec();
    for c in 0..3 {
        let mut vals = Vec::new();
        for n in 0..4 {
            for i in 0..4 {
                vals.push(yd[(n * 3 + c) * 4 + i]);
            }
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-9, "channel {c} mean {m}");
        assert!((v - 1.0).abs() < 1e-3, "channel {c} var {v}");
    }
}

#[test]
fn losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let pred = smooth_random(&[3, 4], &mut rng);
        let target = smooth_random(&[3, 4], &mut rng);
        checker()
            .check(&[pred.clone(), target.clone()], |tape, vars| {
                tape.mse(vars[0], vars[1]).unwrap()
            })
            .unwrap();
        let logits = smooth_random(&[2, 5, 2, 2], &mut rng);
        let targets: Vec<usize> = (0..8).map(|_| rng.random_range(0..5)).collect();
        checker()
            .check(&[logits], |tape, vars| tape.cross_entropy(vars[0], &targets).unwrap())
            .unwrap();
    }
}

#[test]
fn structured_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // linear + concat + embed
    let x = smooth_random(&[3, 4], &mut rng);
    let w = smooth_random(&[5, 4], &mut rng);
    let b = smooth_random(&[5], &mut rng);
    let table = smooth_random(&[6, 3], &mut rng);
    checker()
        .check(&[x, w, b, table], |tape, vars| {
            let y = tape.linear(vars[0], vars[1], Some(vars[2]));
            let emb = tape.embed_rows(vars[3], &[1, 5, 0]).unwrap();
            let cat = tape.concat_cols(y, emb);
            let t = tape.constant(Tensor::zeros(tape.shape(cat)));
            tape.mse(cat, t).unwrap()
        })
        .unwrap();
    // codebook lookup + channel biases + reshape
    let table = smooth_random(&[4, 2], &mut rng);
    let cb = smooth_random(&[2], &mut rng);
    let icb = smooth_random(&[2, 2], &mut rng);
    let ids = vec![0usize, 3, 1, 2, 2, 0, 1, 3];
    checker()
        .check(&[table, cb, icb], |tape, vars| {
            let z = tape.codebook_lookup(vars[0], &ids, 2, 2).unwrap();
            let z = tape.channel_bias(z, vars[1]);
            let z = tape.item_channel_bias(z, vars[2]);
            let flat = tape.reshape(z, &[2, 8]);
            let t = tape.constant(Tensor::zeros(&[2, 8]));
            tape.mse(flat, t).unwrap()
        })
        .unwrap();
}

#[test]
fn mean_and_sum_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = smooth_random(&[3, 3], &mut rng);
    checker()
        .check(&[x.clone()], |tape, vars| {
            let m = tape.mean(vars[0]);
            let s = tape.sum(vars[0]);
            let p = tape.mul(m, s);
            tape.sum(p)
        })
        .unwrap();
}

/// Direct quadruple-loop convolution, written independently of the im2col path.
#[allow(clippy::too_many_arguments)]
fn direct_conv(
    x: &[f64],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    c_out: usize,
    k: usize,
    bias: &[f64],
    stride: usize,
) -> Vec<f64> {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = vec![0.0; n * c_out * oh * ow];
    for ni in 0..n {
        for co in 0..c_out {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for ki in 0..k {
                            for kj in 0..k {
                                let xv = x[((ni * c_in + ci) * h + oi * stride + ki) * w + oj * stride + kj];
                                let wv = wt[((co * c_in + ci) * k + ki) * k + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * c_out + co) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_forward_matches_direct_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = smooth_random(&[1, 2, 5, 5], &mut rng);
    let w = smooth_random(&[3, 2, 3, 3], &mut rng);
    let b = smooth_random(&[3], &mut rng);
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(&x);
    let wv = tape.leaf(&w);
    let bv = tape.leaf(&b);
    let y = tape.conv2d(xv, wv, Some(bv), 1, 0).unwrap();
    let oracle = direct_conv(x.data(), 1, 2, 5, 5, w.data(), 3, 3, b.data(), 1);
    for (got, want) in tape.value(y).data().iter().zip(&oracle) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv_by_finite_differences() {
    // S(x) = <g, conv2d(x, W)>. dS/dx probed by central differences must
    // equal conv_transpose2d(g, W) evaluated in the forward direction.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(c_in, c_out, k, stride) in &[(2usize, 3usize, 2usize, 2usize), (1, 2, 3, 1)] {
        // side chosen so the strided window tiling is exact and the adjoint
        // shape round-trips
        let h = k + 3 * stride;
        let x = smooth_random(&[1, c_in, h, h], &mut rng);
        let w = smooth_random(&[c_out, c_in, k, k], &mut rng);
        let oh = (h - k) / stride + 1;
        let g = smooth_random(&[1, c_out, oh, oh], &mut rng);

        let eval = |x: &Tensor<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(x);
            let wv = tape.constant(w.clone());
            let y = tape.conv2d(xv, wv, None, stride, 0).unwrap();
            let gv = tape.constant(g.clone());
            let p = tape.mul(y, gv);
            let s = tape.sum(p);
            tape.value(s).item()
        };

        let mut fd = vec![0.0f64; x.numel()];
        let hstep = 1e-5;
        let mut probe = x.clone();
        for i in 0..x.numel() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + hstep;
            let up = eval(&probe);
            probe.data_mut()[i] = orig - hstep;
            let down = eval(&probe);
            probe.data_mut()[i] = orig;
            fd[i] = (up - down) / (2.0 * hstep);
        }

        let mut tape = Tape::<f64>::new();
        let gv = tape.leaf(&g);
        let wv = tape.constant(w.clone());
        let adj = tape.conv_transpose2d(gv, wv, None, stride).unwrap();
        assert_eq!(tape.shape(adj), x.shape());
        for (got, want) in tape.value(adj).data().iter().zip(&fd) {
            assert!((got - want).abs() < 1e-6, "adjoint {got} vs finite-diff {want}");
        }
    }
}

#[test]
fn no_op_produces_non_finite_values_for_bounded_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..3 {
        // magnitudes up to 1e3
        let n = 2 + trial;
        let scale = 1e3;
        let mk = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let total: usize = shape.iter().product();
            let data = (0..total).map(|_| rng.random_range(-scale..scale)).collect();
            Tensor::<f64>::from_vec(shape, data).unwrap()
        };
        let x = mk(&[n, 2, 6, 6], &mut rng);
        let w = mk(&[3, 2, 2, 2], &mut rng);
        let b = mk(&[3], &mut rng);
        let gamma = mk(&[3], &mut rng);
        let beta = mk(&[3], &mut rng);
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(&x.clone().requires_grad());
        let wv = tape.leaf(&w.clone().requires_grad());
        let bv = tape.leaf(&b.clone().requires_grad());
        let gv = tape.leaf(&gamma.clone().requires_grad());
        let be = tape.leaf(&beta.clone().requires_grad());
        let y = tape.conv2d(xv, wv, Some(bv), 2, 1).unwrap();
        let (y, _) = tape.batchnorm2d(y, gv, be, BatchNormMode::Train, None).unwrap();
        let y = tape.relu(y);
        let y = tape.sigmoid(y);
        let y = tape.tanh(y);
        let t = tape.constant(Tensor::zeros(tape.shape(y)));
        let loss = tape.mse(y, t).unwrap();
        tape.backward(loss).unwrap();
        tape.check_finite().unwrap();
        for v in [xv, wv, bv, gv, be] {
            assert!(tape.grad_or_zeros(v).all_finite());
        }
    }
}
