//! Raw convolution kernels: im2col/col2im plus the gemm-backed forward and
//! backward passes the tape ops delegate to. All buffers are row-major NCHW.

use crate::tensor::Scalar;

pub fn conv_out_side(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

pub fn conv_transpose_out_side(input: usize, kernel: usize, stride: usize) -> usize {
    (input - 1) * stride + kernel
}

/// Unfolds one image [C,H,W] into columns [C*kh*kw, oh*ow].
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    cols: &mut [F],
) {
    let oh = conv_out_side(h, kh, stride, padding);
    let ow = conv_out_side(w, kw, stride, padding);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let base = row * oh * ow;
                for oi in 0..oh {
                    let si = (oi * stride + ki) as isize - padding as isize;
                    for oj in 0..ow {
                        let sj = (oj * stride + kj) as isize - padding as isize;
                        cols[base + oi * ow + oj] = if si >= 0
                            && (si as usize) < h
                            && sj >= 0
                            && (sj as usize) < w
                        {
                            plane[si as usize * w + sj as usize]
                        } else {
                            F::ZERO
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-adds columns back into an image [C,H,W].
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Scalar>(
    cols: &[F],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    x: &mut [F],
) {
    let oh = conv_out_side(h, kh, stride, padding);
    let ow = conv_out_side(w, kw, stride, padding);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    debug_assert_eq!(x.len(), c * h * w);
    let mut row = 0usize;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let base = row * oh * ow;
                for oi in 0..oh {
                    let si = (oi * stride + ki) as isize - padding as isize;
                    if si < 0 || si as usize >= h {
                        continue;
                    }
                    for oj in 0..ow {
                        let sj = (oj * stride + kj) as isize - padding as isize;
                        if sj < 0 || sj as usize >= w {
                            continue;
                        }
                        x[ci * h * w + si as usize * w + sj as usize] += cols[base + oi * ow + oj];
                    }
                }
                row += 1;
            }
        }
    }
}

pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

/// out[n] = weight[c_out, c_in*kh*kw] x im2col(x[n]) (+ bias).
pub fn conv2d_forward<F: Scalar>(
    d: &ConvDims,
    x: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    out: &mut [F],
) {
    let col_rows = d.c_in * d.kh * d.kw;
    let col_cols = d.oh * d.ow;
    let mut cols = vec![F::ZERO; col_rows * col_cols];
    for n in 0..d.n {
        im2col(
            &x[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w],
            d.c_in,
            d.h,
            d.w,
            d.kh,
            d.kw,
            d.stride,
            d.padding,
            &mut cols,
        );
        let o = &mut out[n * d.c_out * col_cols..(n + 1) * d.c_out * col_cols];
        F::gemm(d.c_out, col_rows, col_cols, weight, &cols, o);
        if let Some(b) = bias {
            for co in 0..d.c_out {
                let bv = b[co];
                for v in &mut o[co * col_cols..(co + 1) * col_cols] {
                    *v += bv;
                }
            }
        }
    }
}

/// Accumulates input/weight/bias gradients for conv2d given upstream `g`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Scalar>(
    d: &ConvDims,
    x: &[F],
    weight: &[F],
    g: &[F],
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
) {
    let col_rows = d.c_in * d.kh * d.kw;
    let col_cols = d.oh * d.ow;
    let mut cols = vec![F::ZERO; col_rows * col_cols];
    let mut dcols = vec![F::ZERO; col_rows * col_cols];
    // weight^T scratch for the input gradient
    let mut wt = vec![F::ZERO; col_rows * d.c_out];
    for r in 0..d.c_out {
        for cidx in 0..col_rows {
            wt[cidx * d.c_out + r] = weight[r * col_rows + cidx];
        }
    }
    let (mut dx, mut dw, mut db) = (dx, dw, db);
    for n in 0..d.n {
        let gn = &g[n * d.c_out * col_cols..(n + 1) * d.c_out * col_cols];
        if dw.is_some() || dx.is_some() {
            im2col(
                &x[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w],
                d.c_in,
                d.h,
                d.w,
                d.kh,
                d.kw,
                d.stride,
                d.padding,
                &mut cols,
            );
        }
        if let Some(dw) = dw.as_deref_mut() {
            // dW[c_out, col_rows] += g[n] x cols^T
            let mut colst = vec![F::ZERO; col_cols * col_rows];
            for r in 0..col_rows {
                for cc in 0..col_cols {
                    colst[cc * col_rows + r] = cols[r * col_cols + cc];
                }
            }
            F::gemm(d.c_out, col_cols, col_rows, gn, &colst, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.iter_mut().for_each(|v| *v = F::ZERO);
            F::gemm(col_rows, d.c_out, col_cols, &wt, gn, &mut dcols);
            col2im(
                &dcols,
                d.c_in,
                d.h,
                d.w,
                d.kh,
                d.kw,
                d.stride,
                d.padding,
                &mut dx[n * d.c_in * d.h * d.w..(n + 1) * d.c_in * d.h * d.w],
            );
        }
        if let Some(db) = db.as_deref_mut() {
            for co in 0..d.c_out {
                let mut s = F::ZERO;
                for &v in &gn[co * col_cols..(co + 1) * col_cols] {
                    s += v;
                }
                db[co] += s;
            }
        }
    }
}

pub struct ConvTDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Transposed convolution: weight is [c_in, c_out, kh, kw]; the forward pass is
/// the adjoint of conv2d's forward with the same kernel.
pub fn conv_transpose2d_forward<F: Scalar>(
    d: &ConvTDims,
    x: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    out: &mut [F],
) {
    let kk = d.c_out * d.kh * d.kw;
    // weight^T: [c_out*kh*kw, c_in]
    let mut wt = vec![F::ZERO; kk * d.c_in];
    for ci in 0..d.c_in {
        for r in 0..kk {
            wt[r * d.c_in + ci] = weight[ci * kk + r];
        }
    }
    let in_cols = d.h * d.w;
    let mut cols = vec![F::ZERO; kk * in_cols];
    for n in 0..d.n {
        cols.iter_mut().for_each(|v| *v = F::ZERO);
        let xn = &x[n * d.c_in * in_cols..(n + 1) * d.c_in * in_cols];
        F::gemm(kk, d.c_in, in_cols, &wt, xn, &mut cols);
        let o = &mut out[n * d.c_out * d.oh * d.ow..(n + 1) * d.c_out * d.oh * d.ow];
        col2im(&cols, d.c_out, d.oh, d.ow, d.kh, d.kw, d.stride, 0, o);
        if let Some(b) = bias {
            for co in 0..d.c_out {
                let bv = b[co];
                for v in &mut o[co * d.oh * d.ow..(co + 1) * d.oh * d.ow] {
                    *v += bv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<F: Scalar>(
    d: &ConvTDims,
    x: &[F],
    weight: &[F],
    g: &[F],
    dx: Option<&mut [F]>,
    dw: Option<&mut [F]>,
    db: Option<&mut [F]>,
) {
    let kk = d.c_out * d.kh * d.kw;
    let in_cols = d.h * d.w;
    let mut gcols = vec![F::ZERO; kk * in_cols];
    let (mut dx, mut dw, mut db) = (dx, dw, db);
    for n in 0..d.n {
        let gn = &g[n * d.c_out * d.oh * d.ow..(n + 1) * d.c_out * d.oh * d.ow];
        // unfolding the output-sized gradient with the same kernel geometry
        // inverts col2im up to the adjoint
        im2col(gn, d.c_out, d.oh, d.ow, d.kh, d.kw, d.stride, 0, &mut gcols);
        if let Some(dx) = dx.as_deref_mut() {
            // dx[c_in, hw] += W[c_in, kk] x gcols[kk, hw]
            F::gemm(
                d.c_in,
                kk,
                in_cols,
                weight,
                &gcols,
                &mut dx[n * d.c_in * in_cols..(n + 1) * d.c_in * in_cols],
            );
        }
        if let Some(dw) = dw.as_deref_mut() {
            // dW[c_in, kk] += x[n][c_in, hw] x gcols^T[hw, kk]
            let mut gt = vec![F::ZERO; in_cols * kk];
            for r in 0..kk {
                for cc in 0..in_cols {
                    gt[cc * kk + r] = gcols[r * in_cols + cc];
                }
            }
            let xn = &x[n * d.c_in * in_cols..(n + 1) * d.c_in * in_cols];
            F::gemm(d.c_in, in_cols, kk, xn, &gt, dw);
        }
        if let Some(db) = db.as_deref_mut() {
            for co in 0..d.c_out {
                let mut s = F::ZERO;
                for &v in &gn[co * d.oh * d.ow..(co + 1) * d.oh * d.ow] {
                    s += v;
                }
                db[co] += s;
            }
        }
    }
}
