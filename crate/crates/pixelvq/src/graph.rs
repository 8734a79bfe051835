//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order; [`Tape::backward`] walks the nodes once in reverse, accumulating
//! gradients into per-node buffers. Parameters enter the graph by value via
//! [`Tape::leaf`] and read their gradients back out after the pass, so the
//! tape is throwaway state rebuilt every training step.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, ConvTDims};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel batch statistics captured during a train-mode batchnorm.
#[derive(Debug, Clone)]
pub struct BatchStats<F: Scalar> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var, F),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Reshape(Var),
    ConcatCols { a: Var, b: Var, a_cols: usize, b_cols: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, inv_std: Vec<F>, train: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    EmbedRows { table: Var, ids: Vec<usize> },
    CodebookLookup { table: Var, ids: Vec<usize> },
    StraightThrough { src: Var },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, softmax: Vec<F> },
    Mean(Var),
    Sum(Var),
    ChannelBias { x: Var, bias: Var },
    ItemChannelBias { x: Var, bias: Var },
}

pub struct Tape<F: Scalar = f32> {
    ops: Vec<Op<F>>,
    vals: Vec<Tensor<F>>,
    grads: Vec<Option<Vec<F>>>,
    needs: Vec<bool>,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), vals: Vec::new(), grads: Vec::new(), needs: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op<F>, val: Tensor<F>, needs: bool) -> Var {
        self.ops.push(op);
        self.vals.push(val);
        self.grads.push(None);
        self.needs.push(needs);
        Var(self.ops.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.0].shape()
    }

    /// Copies a tensor onto the tape. Tracked when `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t.clone(), needs)
    }

    /// Untracked leaf from raw parts.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Untracked copy of a node's current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.vals[v.0].clone();
        self.push(Op::Leaf, t, false)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary_val(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_val(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_val(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_val(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, needs)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary_val(a, b, |x, y| x / y);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Div(a, b), v, needs)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.vals[a.0].map(|x| x * c);
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), v, needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let v = self.vals[a.0].map(|x| x + c);
        let needs = self.needs(a);
        self.push(Op::AddScalar(a, c), v, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].map(|x| x.max(F::ZERO));
        let needs = self.needs(a);
        self.push(Op::Relu(a), v, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].map(|x| F::ONE / (F::ONE + (-x).exp()));
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), v, needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].map(|x| x.tanh());
        let needs = self.needs(a);
        self.push(Op::Tanh(a), v, needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.vals[a.0].map(|x| x.exp());
        let needs = self.needs(a);
        self.push(Op::Exp(a), v, needs)
    }

    pub fn activation(&mut self, kind: ActKind, a: Var) -> Var {
        match kind {
            ActKind::Relu => self.relu(a),
            ActKind::Sigmoid => self.sigmoid(a),
            ActKind::Identity => a,
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.vals[a.0].reshape(shape).expect("reshape numel mismatch");
        let needs = self.needs(a);
        self.push(Op::Reshape(a), v, needs)
    }

    /// Concatenates two [N, A] and [N, B] matrices along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.vals[a.0].shape().to_vec(), self.vals[b.0].shape().to_vec());
        assert_eq!(sa.len(), 2, "concat_cols wants rank-2 inputs");
        assert_eq!(sa[0], sb[0], "concat_cols row count mismatch");
        let (n, ac, bc) = (sa[0], sa[1], sb[1]);
        let mut data = Vec::with_capacity(n * (ac + bc));
        for i in 0..n {
            data.extend_from_slice(&self.vals[a.0].data()[i * ac..(i + 1) * ac]);
            data.extend_from_slice(&self.vals[b.0].data()[i * bc..(i + 1) * bc]);
        }
        let v = Tensor::from_vec(&[n, ac + bc], data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols { a, b, a_cols: ac, b_cols: bc }, v, needs)
    }

    // ---- layers ------------------------------------------------------------

    fn conv_dims(&self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<ConvDims> {
        let xs = self.vals[x.0].shape();
        let ws = self.vals[w.0].shape();
        if xs.len() != 4 {
            return Err(Error::dim(0, format!("conv2d input must be NCHW, got {:?}", xs)));
        }
        if ws.len() != 4 {
            return Err(Error::dim(0, format!("conv2d weight must be [Cout,Cin,kh,kw], got {:?}", ws)));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim(1, format!("input channels {} != weight channels {}", xs[1], ws[1])));
        }
        if ws[2] > xs[2] + 2 * padding {
            return Err(Error::dim(2, format!("kernel height {} exceeds padded input {}", ws[2], xs[2] + 2 * padding)));
        }
        if ws[3] > xs[3] + 2 * padding {
            return Err(Error::dim(3, format!("kernel width {} exceeds padded input {}", ws[3], xs[3] + 2 * padding)));
        }
        if let Some(b) = b {
            let bs = self.vals[b.0].shape();
            if bs != [ws[0]] {
                return Err(Error::dim(0, format!("bias shape {:?} != [{}]", bs, ws[0])));
            }
        }
        Ok(ConvDims {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            padding,
            oh: kernels::conv_out_side(xs[2], ws[2], stride, padding),
            ow: kernels::conv_out_side(xs[3], ws[3], stride, padding),
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let d = self.conv_dims(x, w, b, stride, padding)?;
        let mut out = vec![F::ZERO; d.n * d.c_out * d.oh * d.ow];
        kernels::conv2d_forward(
            &d,
            self.vals[x.0].data(),
            self.vals[w.0].data(),
            b.map(|b| self.vals[b.0].data()),
            &mut out,
        );
        let v = Tensor::from_vec(&[d.n, d.c_out, d.oh, d.ow], out).unwrap();
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Op::Conv2d { x, w, b, stride, padding }, v, needs))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.vals[x.0].shape();
        let ws = self.vals[w.0].shape();
        if xs.len() != 4 {
            return Err(Error::dim(0, format!("conv_transpose2d input must be NCHW, got {:?}", xs)));
        }
        if ws.len() != 4 {
            return Err(Error::dim(0, format!("conv_transpose2d weight must be [Cin,Cout,kh,kw], got {:?}", ws)));
        }
        if stride == 0 {
            return Err(Error::invalid("conv_transpose2d stride must be >= 1"));
        }
        if xs[1] != ws[0] {
            return Err(Error::dim(1, format!("input channels {} != weight in-channels {}", xs[1], ws[0])));
        }
        if let Some(b) = b {
            let bs = self.vals[b.0].shape();
            if bs != [ws[1]] {
                return Err(Error::dim(0, format!("bias shape {:?} != [{}]", bs, ws[1])));
            }
        }
        let d = ConvTDims {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[1],
            kh: ws[2],
            kw: ws[3],
            stride,
            oh: kernels::conv_transpose_out_side(xs[2], ws[2], stride),
            ow: kernels::conv_transpose_out_side(xs[3], ws[3], stride),
        };
        let mut out = vec![F::ZERO; d.n * d.c_out * d.oh * d.ow];
        kernels::conv_transpose2d_forward(
            &d,
            self.vals[x.0].data(),
            self.vals[w.0].data(),
            b.map(|b| self.vals[b.0].data()),
            &mut out,
        );
        let v = Tensor::from_vec(&[d.n, d.c_out, d.oh, d.ow], out).unwrap();
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Op::ConvT2d { x, w, b, stride }, v, needs))
    }

    const BN_EPS: f64 = 1e-5;

    /// Train mode normalizes over (N, H, W) per channel; the returned batch
    /// statistics feed the caller's running-stat update.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode,
        running: Option<(&[F], &[F])>,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let xs = self.vals[x.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::dim(0, format!("batchnorm2d input must be NCHW, got {:?}", xs)));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.vals[gamma.0].shape() != [c] || self.vals[beta.0].shape() != [c] {
            return Err(Error::dim(1, format!("affine params must be [{}]", c)));
        }
        let eps = F::from_f64(Self::BN_EPS);
        let (mean, var): (Vec<F>, Vec<F>) = match mode {
            BatchNormMode::Train => {
                if n < 2 {
                    return Err(Error::DegenerateBatch(n));
                }
                let m = F::from_f64((n * h * w) as f64);
                let xd = self.vals[x.0].data();
                let mut mean = vec![F::ZERO; c];
                let mut var = vec![F::ZERO; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for &v in &xd[base..base + h * w] {
                            mean[ci] += v;
                        }
                    }
                }
                for v in &mut mean {
                    *v = *v / m;
                }
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * h * w;
                        for &v in &xd[base..base + h * w] {
                            let d = v - mean[ci];
                            var[ci] += d * d;
                        }
                    }
                }
                for v in &mut var {
                    *v = *v / m;
                }
                (mean, var)
            }
            BatchNormMode::Eval => {
                let (rm, rv) = running.ok_or_else(|| Error::invalid("eval-mode batchnorm needs running stats"))?;
                if rm.len() != c || rv.len() != c {
                    return Err(Error::dim(1, format!("running stats must be [{}]", c)));
                }
                (rm.to_vec(), rv.to_vec())
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::ONE / (v + eps).sqrt()).collect();
        let xd = self.vals[x.0].data();
        let (gd, bd) = (self.vals[gamma.0].data(), self.vals[beta.0].data());
        let mut out = vec![F::ZERO; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let (mu, istd, gv, bv) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                for i in base..base + h * w {
                    out[i] = (xd[i] - mu) * istd * gv + bv;
                }
            }
        }
        let stats = match mode {
            BatchNormMode::Train => Some(BatchStats { mean: mean.clone(), var: var.clone() }),
            BatchNormMode::Eval => None,
        };
        let v = Tensor::from_vec(&xs, out).unwrap();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let var = self.push(
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train: matches!(mode, BatchNormMode::Train) },
            v,
            needs,
        );
        Ok((var, stats))
    }

    /// y = x W^T + b for x [N, Din], w [Dout, Din].
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.vals[x.0].shape().to_vec();
        let ws = self.vals[w.0].shape().to_vec();
        assert_eq!(xs.len(), 2, "linear input must be [N, Din]");
        assert_eq!(ws.len(), 2, "linear weight must be [Dout, Din]");
        assert_eq!(xs[1], ws[1], "linear in-features mismatch");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let wd = self.vals[w.0].data();
        let mut wt = vec![F::ZERO; din * dout];
        for o in 0..dout {
            for i in 0..din {
                wt[i * dout + o] = wd[o * din + i];
            }
        }
        let mut out = vec![F::ZERO; n * dout];
        F::gemm(n, din, dout, self.vals[x.0].data(), &wt, &mut out);
        if let Some(b) = b {
            let bd = self.vals[b.0].data();
            assert_eq!(bd.len(), dout, "linear bias mismatch");
            for r in 0..n {
                for o in 0..dout {
                    out[r * dout + o] += bd[o];
                }
            }
        }
        let v = Tensor::from_vec(&[n, dout], out).unwrap();
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Op::Linear { x, w, b }, v, needs)
    }

    /// Gathers rows of `table` [V, E] into [n, E].
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.vals[table.0].shape().to_vec();
        assert_eq!(ts.len(), 2, "embed table must be [V, E]");
        let (v_count, e) = (ts[0], ts[1]);
        let td = self.vals[table.0].data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v_count {
                return Err(Error::IndexRange { index: id, limit: v_count });
            }
            out.extend_from_slice(&td[id * e..(id + 1) * e]);
        }
        let v = Tensor::from_vec(&[ids.len(), e], out).unwrap();
        let needs = self.needs(table);
        Ok(self.push(Op::EmbedRows { table, ids: ids.to_vec() }, v, needs))
    }

    /// Expands grid indices into embedding planes: table [K, D] and ids laid
    /// out as [N, G, G] produce [N, D, G, G].
    pub fn codebook_lookup(&mut self, table: Var, ids: &[usize], n: usize, g: usize) -> Result<Var> {
        let ts = self.vals[table.0].shape().to_vec();
        assert_eq!(ts.len(), 2, "codebook must be [K, D]");
        assert_eq!(ids.len(), n * g * g, "grid index count mismatch");
        let (k, d) = (ts[0], ts[1]);
        let td = self.vals[table.0].data();
        let mut out = vec![F::ZERO; n * d * g * g];
        for ni in 0..n {
            for p in 0..g * g {
                let id = ids[ni * g * g + p];
                if id >= k {
                    return Err(Error::IndexRange { index: id, limit: k });
                }
                for di in 0..d {
                    out[((ni * d + di) * g * g) + p] = td[id * d + di];
                }
            }
        }
        let v = Tensor::from_vec(&[n, d, g, g], out).unwrap();
        let needs = self.needs(table);
        Ok(self.push(Op::CodebookLookup { table, ids: ids.to_vec() }, v, needs))
    }

    /// Forward value is bitwise `z_q`; the backward pass copies the incoming
    /// gradient onto `z_e` unchanged and sends nothing to `z_q`.
    pub fn straight_through(&mut self, z_e: Var, z_q: Var) -> Var {
        assert_eq!(self.vals[z_e.0].shape(), self.vals[z_q.0].shape(), "straight_through shape mismatch");
        let v = self.vals[z_q.0].clone();
        let needs = self.needs(z_e);
        self.push(Op::StraightThrough { src: z_e }, v, needs)
    }

    // ---- losses & reductions ----------------------------------------------

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(0, format!("mse shapes {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let n = F::from_f64(ta.numel() as f64);
        let mut s = F::ZERO;
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = x - y;
            s += d * d;
        }
        let v = Tensor::scalar(s / n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mse { a, b }, v, needs))
    }

    /// Mean negative log-softmax of the target class. Logits are [N, K, ...],
    /// targets one index per (item, spatial position) in row-major order.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.vals[logits.0].shape().to_vec();
        if ls.len() < 2 {
            return Err(Error::dim(0, format!("cross_entropy logits must be [N, K, ...], got {:?}", ls)));
        }
        let (n, k) = (ls[0], ls[1]);
        let spatial: usize = ls[2..].iter().product();
        if targets.len() != n * spatial {
            return Err(Error::dim(0, format!("expected {} targets, got {}", n * spatial, targets.len())));
        }
        let ld = self.vals[logits.0].data();
        let mut softmax = vec![F::ZERO; ld.len()];
        let mut loss = F::ZERO;
        for ni in 0..n {
            for p in 0..spatial {
                let mut mx = F::from_f64(f64::NEG_INFINITY);
                for ki in 0..k {
                    mx = mx.max(ld[(ni * k + ki) * spatial + p]);
                }
                let mut z = F::ZERO;
                for ki in 0..k {
                    let e = (ld[(ni * k + ki) * spatial + p] - mx).exp();
                    softmax[(ni * k + ki) * spatial + p] = e;
                    z += e;
                }
                for ki in 0..k {
                    softmax[(ni * k + ki) * spatial + p] = softmax[(ni * k + ki) * spatial + p] / z;
                }
                let t = targets[ni * spatial + p];
                if t >= k {
                    return Err(Error::IndexRange { index: t, limit: k });
                }
                loss += -(softmax[(ni * k + t) * spatial + p].ln());
            }
        }
        let count = F::from_f64((n * spatial) as f64);
        let v = Tensor::scalar(loss / count);
        let needs = self.needs(logits);
        Ok(self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), softmax }, v, needs))
    }

    pub fn loss(&mut self, kind: LossKind, pred: Var, mse_target: Option<Var>, ce_targets: Option<&[usize]>) -> Result<Var> {
        match kind {
            LossKind::Mse => self.mse(pred, mse_target.ok_or_else(|| Error::invalid("mse needs a target tensor"))?),
            LossKind::CrossEntropy => {
                self.cross_entropy(pred, ce_targets.ok_or_else(|| Error::invalid("cross_entropy needs target indices"))?)
            }
        }
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.vals[a.0];
        let n = F::from_f64(t.numel() as f64);
        let mut s = F::ZERO;
        for &x in t.data() {
            s += x;
        }
        let needs = self.needs(a);
        self.push(Op::Mean(a), Tensor::scalar(s / n), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = &self.vals[a.0];
        let mut s = F::ZERO;
        for &x in t.data() {
            s += x;
        }
        let needs = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(s), needs)
    }

    /// Adds `bias[c]` to every (n, h, w) position of channel c.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let xs = self.vals[x.0].shape().to_vec();
        assert_eq!(xs.len(), 4, "channel_bias input must be NCHW");
        let c = xs[1];
        assert_eq!(self.vals[bias.0].shape(), [c], "channel_bias bias must be [C]");
        let hw = xs[2] * xs[3];
        let bd = self.vals[bias.0].data().to_vec();
        let mut out = self.vals[x.0].data().to_vec();
        for ni in 0..xs[0] {
            for ci in 0..c {
                let bv = bd[ci];
                let base = (ni * c + ci) * hw;
                for v in &mut out[base..base + hw] {
                    *v += bv;
                }
            }
        }
        let v = Tensor::from_vec(&xs, out).unwrap();
        let needs = self.needs(x) || self.needs(bias);
        self.push(Op::ChannelBias { x, bias }, v, needs)
    }

    /// Adds `bias[n, c]` to every (h, w) position of item n's channel c.
    pub fn item_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let xs = self.vals[x.0].shape().to_vec();
        assert_eq!(xs.len(), 4, "item_channel_bias input must be NCHW");
        let (n, c) = (xs[0], xs[1]);
        assert_eq!(self.vals[bias.0].shape(), [n, c], "item_channel_bias bias must be [N, C]");
        let hw = xs[2] * xs[3];
        let bd = self.vals[bias.0].data().to_vec();
        let mut out = self.vals[x.0].data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let bv = bd[ni * c + ci];
                let base = (ni * c + ci) * hw;
                for v in &mut out[base..base + hw] {
                    *v += bv;
                }
            }
        }
        let v = Tensor::from_vec(&xs, out).unwrap();
        let needs = self.needs(x) || self.needs(bias);
        self.push(Op::ItemChannelBias { x, bias }, v, needs)
    }

    // ---- backward ----------------------------------------------------------

    fn acc(&mut self, v: Var, g: &[F]) {
        if !self.needs[v.0] {
            return;
        }
        let slot = self.grads[v.0].get_or_insert_with(|| vec![F::ZERO; self.vals[v.0].numel()]);
        debug_assert_eq!(slot.len(), g.len());
        for (s, &x) in slot.iter_mut().zip(g) {
            *s += x;
        }
    }

    /// Reverse pass from a scalar loss. Visits each node exactly once, newest
    /// first; errors if the tape was already consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        self.consumed = true;
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        self.grads[loss.0] = Some(vec![F::ONE]);
        for i in (0..self.ops.len()).rev() {
            if self.grads[i].is_none() || !self.needs[i] {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.step_backward(Var(i), &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn step_backward(&mut self, node: Var, g: &[F]) {
        // Work on a borrowed op by index to satisfy the borrow checker.
        let idx = node.0;
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, g);
                if self.needs(b) {
                    let neg: Vec<F> = g.iter().map(|&x| -x).collect();
                    self.acc(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da: Vec<F> = g.iter().zip(self.vals[b.0].data()).map(|(&gv, &bv)| gv * bv).collect();
                    self.acc(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<F> = g.iter().zip(self.vals[a.0].data()).map(|(&gv, &av)| gv * av).collect();
                    self.acc(b, &db);
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let da: Vec<F> = g.iter().zip(self.vals[b.0].data()).map(|(&gv, &bv)| gv / bv).collect();
                    self.acc(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<F> = g
                        .iter()
                        .zip(self.vals[a.0].data().iter().zip(self.vals[b.0].data()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    self.acc(b, &db);
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let da: Vec<F> = g.iter().map(|&x| x * c).collect();
                self.acc(a, &da);
            }
            Op::AddScalar(a, _) => {
                let a = *a;
                self.acc(a, g);
            }
            Op::Relu(a) => {
                let a = *a;
                let da: Vec<F> = g
                    .iter()
                    .zip(self.vals[a.0].data())
                    .map(|(&gv, &xv)| if xv > F::ZERO { gv } else { F::ZERO })
                    .collect();
                self.acc(a, &da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let da: Vec<F> = g
                    .iter()
                    .zip(self.vals[idx].data())
                    .map(|(&gv, &yv)| gv * yv * (F::ONE - yv))
                    .collect();
                self.acc(a, &da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let da: Vec<F> = g
                    .iter()
                    .zip(self.vals[idx].data())
                    .map(|(&gv, &yv)| gv * (F::ONE - yv * yv))
                    .collect();
                self.acc(a, &da);
            }
            Op::Exp(a) => {
                let a = *a;
                let da: Vec<F> = g
                    .iter()
                    .zip(self.vals[idx].data())
                    .map(|(&gv, &yv)| gv * yv)
                    .collect();
                self.acc(a, &da);
            }
            Op::Reshape(a) => {
                let a = *a;
                self.acc(a, g);
            }
            Op::ConcatCols { a, b, a_cols, b_cols } => {
                let (a, b, ac, bc) = (*a, *b, *a_cols, *b_cols);
                let n = self.vals[idx].shape()[0];
                if self.needs(a) {
                    let mut da = vec![F::ZERO; n * ac];
                    for i in 0..n {
                        da[i * ac..(i + 1) * ac].copy_from_slice(&g[i * (ac + bc)..i * (ac + bc) + ac]);
                    }
                    self.acc(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![F::ZERO; n * bc];
                    for i in 0..n {
                        db[i * bc..(i + 1) * bc].copy_from_slice(&g[i * (ac + bc) + ac..(i + 1) * (ac + bc)]);
                    }
                    self.acc(b, &db);
                }
            }
            Op::Conv2d { x, w, b, stride, padding } => {
                let (x, w, b, stride, padding) = (*x, *w, *b, *stride, *padding);
                let d = self.conv_dims(x, w, b, stride, padding).expect("recorded conv must be valid");
                let mut dx = if self.needs(x) { Some(vec![F::ZERO; self.vals[x.0].numel()]) } else { None };
                let mut dw = if self.needs(w) { Some(vec![F::ZERO; self.vals[w.0].numel()]) } else { None };
                let mut db = match b {
                    Some(b) if self.needs(b) => Some(vec![F::ZERO; self.vals[b.0].numel()]),
                    _ => None,
                };
                kernels::conv2d_backward(
                    &d,
                    self.vals[x.0].data(),
                    self.vals[w.0].data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.acc(x, &dx);
                }
                if let Some(dw) = dw {
                    self.acc(w, &dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(b, &db);
                }
            }
            Op::ConvT2d { x, w, b, stride } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                let xs = self.vals[x.0].shape();
                let ws = self.vals[w.0].shape();
                let d = ConvTDims {
                    n: xs[0],
                    c_in: xs[1],
                    h: xs[2],
                    w: xs[3],
                    c_out: ws[1],
                    kh: ws[2],
                    kw: ws[3],
                    stride,
                    oh: kernels::conv_transpose_out_side(xs[2], ws[2], stride),
                    ow: kernels::conv_transpose_out_side(xs[3], ws[3], stride),
                };
                let mut dx = if self.needs(x) { Some(vec![F::ZERO; self.vals[x.0].numel()]) } else { None };
                let mut dw = if self.needs(w) { Some(vec![F::ZERO; self.vals[w.0].numel()]) } else { None };
                let mut db = match b {
                    Some(b) if self.needs(b) => Some(vec![F::ZERO; self.vals[b.0].numel()]),
                    _ => None,
                };
                kernels::conv_transpose2d_backward(
                    &d,
                    self.vals[x.0].data(),
                    self.vals[w.0].data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.acc(x, &dx);
                }
                if let Some(dw) = dw {
                    self.acc(w, &dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.acc(b, &db);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let xs = self.vals[x.0].shape().to_vec();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = h * w;
                let m = F::from_f64((n * hw) as f64);
                let xd = self.vals[x.0].data();
                let gd = self.vals[gamma.0].data();
                let mut dgamma = vec![F::ZERO; c];
                let mut dbeta = vec![F::ZERO; c];
                let mut sum_dxhat = vec![F::ZERO; c];
                let mut sum_dxhat_xhat = vec![F::ZERO; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            let xhat = (xd[base + i] - mean[ci]) * inv_std[ci];
                            let gv = g[base + i];
                            dgamma[ci] += gv * xhat;
                            dbeta[ci] += gv;
                            let dxhat = gv * gd[ci];
                            sum_dxhat[ci] += dxhat;
                            sum_dxhat_xhat[ci] += dxhat * xhat;
                        }
                    }
                }
                if self.needs(x) {
                    let mut dx = vec![F::ZERO; xd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..hw {
                                let xhat = (xd[base + i] - mean[ci]) * inv_std[ci];
                                let dxhat = g[base + i] * gd[ci];
                                dx[base + i] = if train {
                                    (dxhat * m - sum_dxhat[ci] - xhat * sum_dxhat_xhat[ci]) * inv_std[ci] / m
                                } else {
                                    dxhat * inv_std[ci]
                                };
                            }
                        }
                    }
                    self.acc(x, &dx);
                }
                self.acc(gamma, &dgamma);
                self.acc(beta, &dbeta);
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.vals[x.0].shape();
                let ws = self.vals[w.0].shape();
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                if self.needs(x) {
                    // dx [N, Din] = g [N, Dout] x W [Dout, Din]
                    let mut dx = vec![F::ZERO; n * din];
                    F::gemm(n, dout, din, g, self.vals[w.0].data(), &mut dx);
                    self.acc(x, &dx);
                }
                if self.needs(w) {
                    // dW [Dout, Din] = g^T [Dout, N] x x [N, Din]
                    let mut gt = vec![F::ZERO; dout * n];
                    for r in 0..n {
                        for o in 0..dout {
                            gt[o * n + r] = g[r * dout + o];
                        }
                    }
                    let mut dw = vec![F::ZERO; dout * din];
                    F::gemm(dout, n, din, &gt, self.vals[x.0].data(), &mut dw);
                    self.acc(w, &dw);
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let mut db = vec![F::ZERO; dout];
                        for r in 0..n {
                            for o in 0..dout {
                                db[o] += g[r * dout + o];
                            }
                        }
                        self.acc(b, &db);
                    }
                }
            }
            Op::EmbedRows { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                if self.needs(table) {
                    let e = self.vals[table.0].shape()[1];
                    let mut dt = vec![F::ZERO; self.vals[table.0].numel()];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..e {
                            dt[id * e + j] += g[row * e + j];
                        }
                    }
                    self.acc(table, &dt);
                }
            }
            Op::CodebookLookup { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                if self.needs(table) {
                    let out_shape = self.vals[idx].shape().to_vec();
                    let (n, d, gg) = (out_shape[0], out_shape[1], out_shape[2] * out_shape[3]);
                    let mut dt = vec![F::ZERO; self.vals[table.0].numel()];
                    for ni in 0..n {
                        for p in 0..gg {
                            let id = ids[ni * gg + p];
                            for di in 0..d {
                                dt[id * d + di] += g[(ni * d + di) * gg + p];
                            }
                        }
                    }
                    self.acc(table, &dt);
                }
            }
            Op::StraightThrough { src } => {
                let src = *src;
                self.acc(src, g);
            }
            Op::Mse { a, b } => {
                let (a, b) = (*a, *b);
                let n = F::from_f64(self.vals[a.0].numel() as f64);
                let two = F::from_f64(2.0);
                let gv = g[0];
                if self.needs(a) {
                    let da: Vec<F> = self.vals[a.0]
                        .data()
                        .iter()
                        .zip(self.vals[b.0].data())
                        .map(|(&x, &y)| gv * two * (x - y) / n)
                        .collect();
                    self.acc(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<F> = self.vals[a.0]
                        .data()
                        .iter()
                        .zip(self.vals[b.0].data())
                        .map(|(&x, &y)| -gv * two * (x - y) / n)
                        .collect();
                    self.acc(b, &db);
                }
            }
            Op::CrossEntropy { logits, targets, softmax } => {
                let logits = *logits;
                let (targets, softmax) = (targets.clone(), softmax.clone());
                if self.needs(logits) {
                    let ls = self.vals[logits.0].shape().to_vec();
                    let (n, k) = (ls[0], ls[1]);
                    let spatial: usize = ls[2..].iter().product();
                    let count = F::from_f64((n * spatial) as f64);
                    let gv = g[0];
                    let mut dl = vec![F::ZERO; softmax.len()];
                    for ni in 0..n {
                        for p in 0..spatial {
                            let t = targets[ni * spatial + p];
                            for ki in 0..k {
                                let i = (ni * k + ki) * spatial + p;
                                let onehot = if ki == t { F::ONE } else { F::ZERO };
                                dl[i] = gv * (softmax[i] - onehot) / count;
                            }
                        }
                    }
                    self.acc(logits, &dl);
                }
            }
            Op::Mean(a) => {
                let a = *a;
                let n = F::from_f64(self.vals[a.0].numel() as f64);
                let gv = g[0] / n;
                let da = vec![gv; self.vals[a.0].numel()];
                self.acc(a, &da);
            }
            Op::Sum(a) => {
                let a = *a;
                let da = vec![g[0]; self.vals[a.0].numel()];
                self.acc(a, &da);
            }
            Op::ChannelBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                self.acc(x, g);
                if self.needs(bias) {
                    let xs = self.vals[x.0].shape();
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut db = vec![F::ZERO; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for &gv in &g[base..base + hw] {
                                db[ci] += gv;
                            }
                        }
                    }
                    self.acc(bias, &db);
                }
            }
            Op::ItemChannelBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                self.acc(x, g);
                if self.needs(bias) {
                    let xs = self.vals[x.0].shape();
                    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut db = vec![F::ZERO; n * c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for &gv in &g[base..base + hw] {
                                db[ni * c + ci] += gv;
                            }
                        }
                    }
                    self.acc(bias, &db);
                }
            }
        }
    }

    /// Gradient buffer of a node, if one was accumulated.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor; parameters the loss never reached get zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<F> {
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec(self.vals[v.0].shape(), g.clone()).unwrap(),
            None => Tensor::zeros(self.vals[v.0].shape()),
        }
    }

    /// Writes the accumulated gradient into the tensor's grad slot.
    pub fn write_grad(&self, v: Var, target: &mut Tensor<F>) {
        target.grad = Some(self.grad_or_zeros(v).into_data());
    }

    /// Scans every recorded value for NaN/Inf.
    pub fn check_finite(&self) -> Result<()> {
        for (i, v) in self.vals.iter().enumerate() {
            if !v.all_finite() {
                return Err(Error::NonFinite(format!("node {} (shape {:?})", i, v.shape())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]).requires_grad());
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_scalar_gradient() {
        // loss = mse(w, 0) with w = 3 => dloss/dw = 2*3 = 6
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(&t(&[1], &[3.0]).requires_grad());
        let zero = tape.constant(t(&[1], &[0.0]));
        let loss = tape.mse(w, zero).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn double_use_accumulates() {
        // loss = sum(w * w) => grad = 2w via two mul contributions
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]).requires_grad());
        let prod = tape.mul(w, w);
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_stale() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(&t(&[1], &[2.0]).requires_grad());
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(matches!(err, Error::StaleTape));
    }

    #[test]
    fn relu_sigmoid_identity_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
        let i = tape.activation(ActKind::Identity, x);
        assert_eq!(tape.value(i).data(), tape.value(x).data());
    }

    #[test]
    fn uniform_cross_entropy_is_ln_k() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(t(&[1, 4], &[0.3, 0.3, 0.3, 0.3]));
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        let expect = (4.0f32).ln();
        assert!((tape.value(loss).item() - expect).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::<f32>::new();
        let logits = tape.constant(t(&[1, 4], &[0.0; 4]));
        let err = tape.cross_entropy(logits, &[4]).unwrap_err();
        assert!(matches!(err, Error::IndexRange { index: 4, limit: 4 }));
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1, 1, 4, 4], &(0..16).map(|v| v as f32).collect::<Vec<_>>()));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    }

    #[test]
    fn stride_two_halves_spatial_size() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let w = tape.constant(Tensor::zeros(&[8, 3, 2, 2]));
        let y = tape.conv2d(x, w, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 32, 32]);
    }

    #[test]
    fn conv_channel_mismatch_names_axis() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let w = tape.constant(Tensor::zeros(&[4, 2, 2, 2]));
        match tape.conv2d(x, w, None, 1, 0) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, 1),
            other => panic!("expected dimension error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn transpose_conv_tiles_blocks() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1.0; 4]));
        let y = tape.conv_transpose2d(x, w, None, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
        let expect = [
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(tape.value(y).data(), &expect);
    }

    #[test]
    fn transpose_conv_upsamples_32_to_64() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 8, 32, 32]));
        let w = tape.constant(Tensor::zeros(&[8, 3, 2, 2]));
        let y = tape.conv_transpose2d(x, w, None, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 64, 64]);
    }

    #[test]
    fn batchnorm_constant_input_is_zeroed() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 2, 2], 7.0));
        let gamma = tape.constant(Tensor::full(&[3], 1.0));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let (y, stats) = tape.batchnorm2d(x, gamma, beta, BatchNormMode::Train, None).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-6));
        let stats = stats.unwrap();
        assert!((stats.mean[0] - 7.0).abs() < 1e-6);
        assert!(stats.var[0].abs() < 1e-6);
    }

    #[test]
    fn batchnorm_gamma_zero_outputs_beta() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[2, 1, 1, 2], &[0.5, -1.0, 2.0, 3.5]));
        let gamma = tape.constant(Tensor::zeros(&[1]));
        let beta = tape.constant(Tensor::full(&[1], 4.25));
        let (y, _) = tape.batchnorm2d(x, gamma, beta, BatchNormMode::Train, None).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 4.25).abs() < 1e-6));
    }

    #[test]
    fn batchnorm_rejects_single_item_batch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let gamma = tape.constant(Tensor::full(&[3], 1.0));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let err = tape.batchnorm2d(x, gamma, beta, BatchNormMode::Train, None).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(1)));
    }

    #[test]
    fn straight_through_forwards_zq_and_routes_grad_to_ze() {
        let mut tape = Tape::<f32>::new();
        let z_e = tape.leaf(&t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]).requires_grad());
        let z_q = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let st = tape.straight_through(z_e, z_q);
        assert_eq!(tape.value(st).data(), tape.value(z_q).data());
        let loss = tape.sum(st);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(z_e).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_grad() {
        let mut tape = Tape::<f32>::new();
        let used = tape.leaf(&t(&[2], &[1.0, 2.0]).requires_grad());
        let unused = tape.leaf(&t(&[2], &[5.0, 6.0]).requires_grad());
        let loss = tape.sum(used);
        tape.backward(loss).unwrap();
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_or_zeros(unused).data(), &[0.0, 0.0]);
    }
}
