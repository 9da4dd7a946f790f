//! Forward kernels and their vector-Jacobian products.
//!
//! Everything is f64, row-major. Elementwise ops use numpy-style
//! align-right broadcasting; gradients are reduced back over broadcast
//! axes. Matrix products go through `matrixmultiply::dgemm`.

use super::graph::{Node, Op};
use super::Tensor;
use crate::error::{Result, SpmixError};

// ---------------------------------------------------------------------------
// shape helpers

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = s;
        s *= shape[i];
    }
    strides
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < a.len() { a[a.len() - 1 - i] } else { 1 };
        let db = if i < b.len() { b[b.len() - 1 - i] } else { 1 };
        out[rank - 1 - i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(SpmixError::contract(format!(
                "shapes {a:?} and {b:?} do not broadcast"
            )));
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed in `out` space (0 where broadcast).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nat = row_major_strides(shape);
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    for i in 0..out.len() {
        if i >= offset && shape[i - offset] != 1 {
            strides[i] = nat[i - offset];
        }
    }
    strides
}

/// Walks every element of `out_shape`, handing (out_idx, a_idx, b_idx) to `f`.
fn broadcast_walk(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let len: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for out_idx in 0..len {
        f(out_idx, ia, ib);
        for d in (0..rank).rev() {
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise binary

fn ew_forward(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok((a.shape().to_vec(), data));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![0.0; out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    broadcast_walk(&out_shape, &sa, &sb, |o, ia, ib| {
        data[o] = f(ad[ia], bd[ib]);
    });
    Ok((out_shape, data))
}

/// Fused backward for broadcasting binary ops: accumulates
/// `gout * df/da` into the a-shaped buffer and likewise for b.
#[allow(clippy::too_many_arguments)]
fn ew_vjp(
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    gout: &[f64],
    want_a: bool,
    want_b: bool,
    dfa: impl Fn(f64, f64) -> f64,
    dfb: impl Fn(f64, f64) -> f64,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut da = want_a.then(|| vec![0.0; a.len()]);
    let mut db = want_b.then(|| vec![0.0; b.len()]);
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        for i in 0..gout.len() {
            if let Some(da) = da.as_mut() {
                da[i] += gout[i] * dfa(ad[i], bd[i]);
            }
            if let Some(db) = db.as_mut() {
                db[i] += gout[i] * dfb(ad[i], bd[i]);
            }
        }
        return (da, db);
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    broadcast_walk(out_shape, &sa, &sb, |o, ia, ib| {
        if let Some(da) = da.as_mut() {
            da[ia] += gout[o] * dfa(ad[ia], bd[ib]);
        }
        if let Some(db) = db.as_mut() {
            db[ib] += gout[o] * dfb(ad[ia], bd[ib]);
        }
    });
    (da, db)
}

// ---------------------------------------------------------------------------
// dgemm

/// Row-major GEMM with optional logical transposes: c = alpha*op(a)*op(b) + beta*c.
/// `a` is m x k after `ta`, `b` is k x n after `tb`, `c` is m x n.
#[allow(clippy::too_many_arguments)]
fn dgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<MatmulDims> {
    let (ar, br) = (a.ndim(), b.ndim());
    if ar < 2 || br < 2 {
        return Err(SpmixError::contract(format!(
            "matmul needs rank >= 2 operands, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (kb, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    if k != kb {
        return Err(SpmixError::contract(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let a_lead = &a.shape()[..ar - 2];
    let b_shared = br == 2 && ar > 2;
    if !b_shared && a_lead != &b.shape()[..br - 2] {
        return Err(SpmixError::contract(format!(
            "matmul leading dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out_shape = a_lead.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulDims {
        batch: a_lead.iter().product(),
        m,
        k,
        n,
        b_shared,
        out_shape,
    })
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let d = matmul_dims(a, b)?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for i in 0..d.batch {
        let aoff = i * d.m * d.k;
        let boff = if d.b_shared { 0 } else { i * d.k * d.n };
        dgemm_rm(
            d.m,
            d.k,
            d.n,
            1.0,
            &a.data()[aoff..aoff + d.m * d.k],
            false,
            &b.data()[boff..boff + d.k * d.n],
            false,
            0.0,
            &mut out[i * d.m * d.n..(i + 1) * d.m * d.n],
        );
    }
    Ok((d.out_shape, out))
}

fn matmul_vjp(
    a: &Tensor,
    b: &Tensor,
    gout: &[f64],
    want_a: bool,
    want_b: bool,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let d = matmul_dims(a, b)?;
    let mut da = want_a.then(|| vec![0.0; a.len()]);
    let mut db = want_b.then(|| vec![0.0; b.len()]);
    for i in 0..d.batch {
        let aoff = i * d.m * d.k;
        let boff = if d.b_shared { 0 } else { i * d.k * d.n };
        let goff = i * d.m * d.n;
        let g = &gout[goff..goff + d.m * d.n];
        if let Some(da) = da.as_mut() {
            // dA = g @ B^T : (m x n)(n x k)
            dgemm_rm(
                d.m,
                d.n,
                d.k,
                1.0,
                g,
                false,
                &b.data()[boff..boff + d.k * d.n],
                true,
                0.0,
                &mut da[aoff..aoff + d.m * d.k],
            );
        }
        if let Some(db) = db.as_mut() {
            // dB = A^T @ g : (k x m)(m x n); shared rhs accumulates over batches
            let beta = if d.b_shared && i > 0 { 1.0 } else { 0.0 };
            dgemm_rm(
                d.k,
                d.m,
                d.n,
                1.0,
                &a.data()[aoff..aoff + d.m * d.k],
                true,
                g,
                false,
                beta,
                &mut db[boff..boff + d.k * d.n],
            );
        }
    }
    Ok((da, db))
}

// ---------------------------------------------------------------------------
// conv2d (NHWC, im2col + gemm)

struct ConvDims {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    oc: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
    if input.ndim() != 4 || kernel.ndim() != 4 {
        return Err(SpmixError::contract(format!(
            "conv2d expects input [B,H,W,C] and kernel [KH,KW,C,OC], got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    let (b, h, w, c) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (kh, kw, kc, oc) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if c != kc {
        return Err(SpmixError::contract(format!(
            "conv2d channel mismatch: input {:?} vs kernel {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    if stride == 0 {
        return Err(SpmixError::contract("conv2d stride must be >= 1"));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(SpmixError::contract(format!(
            "conv2d kernel {}x{} larger than padded input {}x{}",
            kh,
            kw,
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok(ConvDims {
        b,
        h,
        w,
        c,
        kh,
        kw,
        oc,
        oh,
        ow,
    })
}

fn im2col(input: &[f64], d: &ConvDims, stride: usize, pad: usize) -> Vec<f64> {
    let cols = d.kh * d.kw * d.c;
    let mut col = vec![0.0; d.b * d.oh * d.ow * cols];
    let mut row = 0usize;
    for b in 0..d.b {
        let ibase = b * d.h * d.w * d.c;
        for oh in 0..d.oh {
            for ow in 0..d.ow {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for kh in 0..d.kh {
                    let ih = (oh * stride + kh) as isize - pad as isize;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    for kw in 0..d.kw {
                        let iw = (ow * stride + kw) as isize - pad as isize;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        let src = ibase + ((ih as usize) * d.w + iw as usize) * d.c;
                        let doff = (kh * d.kw + kw) * d.c;
                        dst[doff..doff + d.c].copy_from_slice(&input[src..src + d.c]);
                    }
                }
                row += 1;
            }
        }
    }
    col
}

fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let d = conv_dims(input, kernel, stride, pad)?;
    let col = im2col(input.data(), &d, stride, pad);
    let rows = d.b * d.oh * d.ow;
    let cols = d.kh * d.kw * d.c;
    let mut out = vec![0.0; rows * d.oc];
    dgemm_rm(rows, cols, d.oc, 1.0, &col, false, kernel.data(), false, 0.0, &mut out);
    Ok((vec![d.b, d.oh, d.ow, d.oc], out))
}

fn conv2d_vjp(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    gout: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let d = conv_dims(input, kernel, stride, pad)?;
    let rows = d.b * d.oh * d.ow;
    let cols = d.kh * d.kw * d.c;
    let dk = if want_kernel {
        let col = im2col(input.data(), &d, stride, pad);
        let mut dk = vec![0.0; cols * d.oc];
        dgemm_rm(cols, rows, d.oc, 1.0, &col, true, gout, false, 0.0, &mut dk);
        Some(dk)
    } else {
        None
    };
    let di = if want_input {
        let mut dcol = vec![0.0; rows * cols];
        dgemm_rm(rows, d.oc, cols, 1.0, gout, false, kernel.data(), true, 0.0, &mut dcol);
        // col2im scatter-add
        let mut di = vec![0.0; input.len()];
        let mut row = 0usize;
        for b in 0..d.b {
            let ibase = b * d.h * d.w * d.c;
            for oh in 0..d.oh {
                for ow in 0..d.ow {
                    let src = &dcol[row * cols..(row + 1) * cols];
                    for kh in 0..d.kh {
                        let ih = (oh * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= d.h as isize {
                            continue;
                        }
                        for kw in 0..d.kw {
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= d.w as isize {
                                continue;
                            }
                            let dst = ibase + ((ih as usize) * d.w + iw as usize) * d.c;
                            let soff = (kh * d.kw + kw) * d.c;
                            for c in 0..d.c {
                                di[dst + c] += src[soff + c];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        Some(di)
    } else {
        None
    };
    Ok((di, dk))
}

// ---------------------------------------------------------------------------
// normalization rows

fn last_dim(t: &Tensor) -> Result<usize> {
    t.shape().last().copied().ok_or_else(|| {
        SpmixError::contract("operation over the last axis needs rank >= 1".to_string())
    })
}

fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let d = last_dim(x)?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(SpmixError::contract(format!(
            "layer_norm affine shapes {:?}/{:?} do not match feature dim {d}",
            gain.shape(),
            bias.shape()
        )));
    }
    let mut out = vec![0.0; x.len()];
    let (xd, g, b) = (x.data(), gain.data(), bias.data());
    for row in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let (xr, or) = row;
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            or[i] = (xr[i] - mean) * inv * g[i] + b[i];
        }
    }
    Ok((x.shape().to_vec(), out))
}

#[allow(clippy::type_complexity)]
fn layer_norm_vjp(
    x: &Tensor,
    gain: &Tensor,
    eps: f64,
    gout: &[f64],
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let d = *x.shape().last().unwrap();
    let mut dx = want[0].then(|| vec![0.0; x.len()]);
    let mut dg = want[1].then(|| vec![0.0; d]);
    let mut db = want[2].then(|| vec![0.0; d]);
    let (xd, g) = (x.data(), gain.data());
    let rows = x.len() / d;
    let mut norm = vec![0.0; d];
    for r in 0..rows {
        let xr = &xd[r * d..(r + 1) * d];
        let gr = &gout[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            norm[i] = (xr[i] - mean) * inv;
        }
        if let Some(dx) = dx.as_mut() {
            let mut mean_dn = 0.0;
            let mut mean_dn_norm = 0.0;
            for i in 0..d {
                let dn = gr[i] * g[i];
                mean_dn += dn;
                mean_dn_norm += dn * norm[i];
            }
            mean_dn /= d as f64;
            mean_dn_norm /= d as f64;
            let dxr = &mut dx[r * d..(r + 1) * d];
            for i in 0..d {
                let dn = gr[i] * g[i];
                dxr[i] = inv * (dn - mean_dn - norm[i] * mean_dn_norm);
            }
        }
        if let Some(dg) = dg.as_mut() {
            for i in 0..d {
                dg[i] += gr[i] * norm[i];
            }
        }
        if let Some(db) = db.as_mut() {
            for i in 0..d {
                db[i] += gr[i];
            }
        }
    }
    (dx, dg, db)
}

fn softmax_forward(x: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let d = last_dim(x)?;
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..d {
            or[i] = (xr[i] - max).exp();
            sum += or[i];
        }
        for v in or.iter_mut() {
            *v /= sum;
        }
    }
    Ok((x.shape().to_vec(), out))
}

fn softmax_vjp(y: &Tensor, gout: &[f64]) -> Vec<f64> {
    let d = *y.shape().last().unwrap();
    let mut dx = vec![0.0; y.len()];
    for ((yr, gr), dr) in y
        .data()
        .chunks_exact(d)
        .zip(gout.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for i in 0..d {
            dr[i] = yr[i] * (gr[i] - dot);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// reductions / movement

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(SpmixError::contract(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, n, inner))
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}

fn sum_axis_forward(
    x: &Tensor,
    axis: usize,
    keepdim: bool,
    scale: f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let mut out = vec![0.0; outer * inner];
    let xd = x.data();
    for o in 0..outer {
        for j in 0..n {
            let base = (o * n + j) * inner;
            let obase = o * inner;
            for i in 0..inner {
                out[obase + i] += xd[base + i];
            }
        }
    }
    if scale != 1.0 {
        for v in out.iter_mut() {
            *v *= scale;
        }
    }
    Ok((reduced_shape(x.shape(), axis, keepdim), out))
}

fn sum_axis_vjp(x: &Tensor, axis: usize, scale: f64, gout: &[f64]) -> Vec<f64> {
    let (outer, n, inner) = axis_split(x.shape(), axis).unwrap();
    let mut dx = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..n {
            let base = (o * n + j) * inner;
            let gbase = o * inner;
            for i in 0..inner {
                dx[base + i] = gout[gbase + i] * scale;
            }
        }
    }
    dx
}

fn permute_forward(x: &Tensor, perm: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
    let rank = x.ndim();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(SpmixError::contract(format!(
            "invalid permutation {:?} for shape {:?}",
            perm,
            x.shape()
        )));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let nat = row_major_strides(x.shape());
    let in_strides: Vec<usize> = perm.iter().map(|&p| nat[p]).collect();
    let mut out = vec![0.0; x.len()];
    let xd = x.data();
    let mut counter = vec![0usize; rank];
    let mut ix = 0usize;
    for o in out.iter_mut() {
        *o = xd[ix];
        for d in (0..rank).rev() {
            counter[d] += 1;
            ix += in_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
            ix -= in_strides[d] * out_shape[d];
        }
    }
    Ok((out_shape, out))
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn concat_forward(parts: &[&Tensor], axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let first = parts
        .first()
        .ok_or_else(|| SpmixError::contract("concat needs at least one input"))?;
    let rank = first.ndim();
    if axis >= rank {
        return Err(SpmixError::contract(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    for p in parts {
        if p.ndim() != rank
            || p.shape()[..axis] != first.shape()[..axis]
            || p.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(SpmixError::contract(format!(
                "concat shapes incompatible: {:?} vs {:?} on axis {axis}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let axis_total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * axis_total * inner];
    let out_row = axis_total * inner;
    for o in 0..outer {
        let mut written = 0usize;
        for p in parts {
            let block = p.shape()[axis] * inner;
            let src = &p.data()[o * block..(o + 1) * block];
            out[o * out_row + written..o * out_row + written + block].copy_from_slice(src);
            written += block;
        }
    }
    Ok((out_shape, out))
}

// ---------------------------------------------------------------------------
// dispatch

pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    match op {
        Op::Add => ew_forward(inputs[0], inputs[1], |a, b| a + b),
        Op::Sub => ew_forward(inputs[0], inputs[1], |a, b| a - b),
        Op::Mul => ew_forward(inputs[0], inputs[1], |a, b| a * b),
        Op::Div => ew_forward(inputs[0], inputs[1], |a, b| a / b),
        Op::AddScalar(c) => Ok((
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|v| v + c).collect(),
        )),
        Op::MulScalar(c) => Ok((
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|v| v * c).collect(),
        )),
        Op::Exp => Ok((
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|v| v.exp()).collect(),
        )),
        Op::Log => Ok((
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|v| v.ln()).collect(),
        )),
        Op::Sqrt => Ok((
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|v| v.sqrt()).collect(),
        )),
        Op::Relu => Ok((
            inputs[0].shape().to_vec(),
            inputs[0].data().iter().map(|v| v.max(0.0)).collect(),
        )),
        Op::Matmul => matmul_forward(inputs[0], inputs[1]),
        Op::Conv2d { stride, pad } => conv2d_forward(inputs[0], inputs[1], *stride, *pad),
        Op::LayerNorm { eps } => layer_norm_forward(inputs[0], inputs[1], inputs[2], *eps),
        Op::Softmax => softmax_forward(inputs[0]),
        Op::SumAxis { axis, keepdim } => sum_axis_forward(inputs[0], *axis, *keepdim, 1.0),
        Op::MeanAxis { axis, keepdim } => {
            let n = inputs[0]
                .shape()
                .get(*axis)
                .copied()
                .ok_or_else(|| SpmixError::contract(format!("axis {axis} out of range")))?;
            sum_axis_forward(inputs[0], *axis, *keepdim, 1.0 / n as f64)
        }
        Op::SumAll => Ok((vec![], vec![inputs[0].data().iter().sum()])),
        Op::MeanAll => Ok((
            vec![],
            vec![inputs[0].data().iter().sum::<f64>() / inputs[0].len() as f64],
        )),
        Op::Reshape => Ok((inputs[0].shape().to_vec(), inputs[0].data().to_vec())),
        Op::Permute { perm } => permute_forward(inputs[0], perm),
        Op::Concat { axis } => concat_forward(inputs, *axis),
    }
}

pub(crate) fn vjp(node: &Node, gout: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
    let ins = &node.inputs;
    let want: Vec<bool> = ins.iter().map(|t| t.needs_grad()).collect();
    let out = &node.output;
    match &node.op {
        Op::Add => {
            let (da, db) = ew_vjp(
                &ins[0], &ins[1], out.shape(), gout, want[0], want[1],
                |_, _| 1.0,
                |_, _| 1.0,
            );
            Ok(vec![da, db])
        }
        Op::Sub => {
            let (da, db) = ew_vjp(
                &ins[0], &ins[1], out.shape(), gout, want[0], want[1],
                |_, _| 1.0,
                |_, _| -1.0,
            );
            Ok(vec![da, db])
        }
        Op::Mul => {
            let (da, db) = ew_vjp(
                &ins[0], &ins[1], out.shape(), gout, want[0], want[1],
                |_, b| b,
                |a, _| a,
            );
            Ok(vec![da, db])
        }
        Op::Div => {
            let (da, db) = ew_vjp(
                &ins[0], &ins[1], out.shape(), gout, want[0], want[1],
                |_, b| 1.0 / b,
                |a, b| -a / (b * b),
            );
            Ok(vec![da, db])
        }
        Op::AddScalar(_) => Ok(vec![want[0].then(|| gout.to_vec())]),
        Op::MulScalar(c) => Ok(vec![want[0].then(|| gout.iter().map(|g| g * c).collect())]),
        Op::Exp => Ok(vec![want[0].then(|| {
            out.data().iter().zip(gout).map(|(&y, &g)| y * g).collect()
        })]),
        Op::Log => Ok(vec![want[0].then(|| {
            ins[0].data().iter().zip(gout).map(|(&x, &g)| g / x).collect()
        })]),
        Op::Sqrt => Ok(vec![want[0].then(|| {
            out.data()
                .iter()
                .zip(gout)
                .map(|(&y, &g)| g * 0.5 / y)
                .collect()
        })]),
        Op::Relu => Ok(vec![want[0].then(|| {
            ins[0]
                .data()
                .iter()
                .zip(gout)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect()
        })]),
        Op::Matmul => {
            let (da, db) = matmul_vjp(&ins[0], &ins[1], gout, want[0], want[1])?;
            Ok(vec![da, db])
        }
        Op::Conv2d { stride, pad } => {
            let (di, dk) = conv2d_vjp(&ins[0], &ins[1], *stride, *pad, gout, want[0], want[1])?;
            Ok(vec![di, dk])
        }
        Op::LayerNorm { eps } => {
            let (dx, dg, db) = layer_norm_vjp(
                &ins[0],
                &ins[1],
                *eps,
                gout,
                [want[0], want[1], want[2]],
            );
            Ok(vec![dx, dg, db])
        }
        Op::Softmax => Ok(vec![want[0].then(|| softmax_vjp(out, gout))]),
        Op::SumAxis { axis, .. } => {
            Ok(vec![want[0].then(|| sum_axis_vjp(&ins[0], *axis, 1.0, gout))])
        }
        Op::MeanAxis { axis, .. } => {
            let n = ins[0].shape()[*axis] as f64;
            Ok(vec![want[0].then(|| sum_axis_vjp(&ins[0], *axis, 1.0 / n, gout))])
        }
        Op::SumAll => Ok(vec![want[0].then(|| vec![gout[0]; ins[0].len()])]),
        Op::MeanAll => Ok(vec![
            want[0].then(|| vec![gout[0] / ins[0].len() as f64; ins[0].len()]),
        ]),
        Op::Reshape => Ok(vec![want[0].then(|| gout.to_vec())]),
        Op::Permute { perm } => {
            if !want[0] {
                return Ok(vec![None]);
            }
            let inv = invert_perm(perm);
            let gt = Tensor::from_parts(out.shape().to_vec(), gout.to_vec(), false);
            let (_, dx) = permute_forward(&gt, &inv)?;
            Ok(vec![Some(dx)])
        }
        Op::Concat { axis } => {
            let first = &ins[0];
            let outer: usize = first.shape()[..*axis].iter().product();
            let inner: usize = first.shape()[*axis + 1..].iter().product();
            let out_row = out.shape()[*axis] * inner;
            let mut grads: Vec<Option<Vec<f64>>> = ins
                .iter()
                .zip(&want)
                .map(|(t, &w)| w.then(|| vec![0.0; t.len()]))
                .collect();
            for o in 0..outer {
                let mut offset = 0usize;
                for (t, slot) in ins.iter().zip(grads.iter_mut()) {
                    let block = t.shape()[*axis] * inner;
                    if let Some(buf) = slot.as_mut() {
                        buf[o * block..(o + 1) * block]
                            .copy_from_slice(&gout[o * out_row + offset..o * out_row + offset + block]);
                    }
                    offset += block;
                }
            }
            Ok(grads)
        }
    }
}

/// Row-wise maximum over the last axis as a detached constant `[..., 1]`.
/// Used for numerically stable log-sum-exp; the shift cancels analytically,
/// so treating it as a constant leaves values and gradients exact.
pub fn detached_row_max(t: &Tensor) -> Tensor {
    let d = *t.shape().last().expect("rank >= 1");
    let rows = t.len() / d;
    let mut out = Vec::with_capacity(rows);
    for row in t.data().chunks_exact(d) {
        out.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    let mut shape = t.shape().to_vec();
    *shape.last_mut().unwrap() = 1;
    Tensor::from_parts(shape, out, false)
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn scalar_matmul() {
        let mut g = Graph::new();
        let a = t(&[1, 1], &[2.0]);
        let b = t(&[1, 1], &[3.0]);
        let c = g.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[6.0]);
    }

    #[test]
    fn matmul_2x2() {
        let mut g = Graph::new();
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = g.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        let err = g.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry() {
        let mut g = Graph::new();
        let x = t(&[2], &[0.0, 0.0]);
        let y = g.softmax(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = t(&[3], &[5.0, 5.0, 5.0]);
        let gain = Tensor::full(&[3], 1.0);
        let bias = Tensor::zeros(&[3]);
        let y = g.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn broadcasting_bias_add() {
        let mut g = Graph::new();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3], &[10.0, 20.0, 30.0]);
        let y = g.add(&x, &b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn broadcasting_last_dim_one() {
        let mut g = Graph::new();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = t(&[2, 1], &[2.0, 10.0]);
        let y = g.mul(&x, &r).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 40.0, 50.0, 60.0]);
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let mut g = Graph::new();
        let x = t(&[2, 3], &[0.0; 6]);
        let y = t(&[2, 2], &[0.0; 4]);
        assert!(g.add(&x, &y).is_err());
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let input = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let kernel = t(&[1, 1, 1, 1], &[1.0]);
        let y = g.conv2d(&input, &kernel, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), input.data());
    }

    #[test]
    fn conv2d_box_sum_with_padding() {
        let mut g = Graph::new();
        let input = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let kernel = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = g.conv2d(&input, &kernel, 1, 1).unwrap();
        // every output position sums all in-range pixels of the 2x2 input
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv2d_stride() {
        let mut g = Graph::new();
        let input = t(&[1, 4, 4, 1], &(0..16).map(|v| v as f64).collect::<Vec<_>>());
        let kernel = t(&[2, 2, 1, 1], &[1.0, 1.0, 1.0, 1.0]);
        let y = g.conv2d(&input, &kernel, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[10.0, 18.0, 42.0, 50.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let x = t(&[2, 3, 4], &(0..24).map(|v| v as f64).collect::<Vec<_>>());
        let p = g.permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = g.permute(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn concat_axis0_and_axis1() {
        let mut g = Graph::new();
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[1, 2], &[3.0, 4.0]);
        let c0 = g.concat(&[&a, &b], 0).unwrap();
        assert_eq!(c0.shape(), &[2, 2]);
        assert_eq!(c0.data(), &[1.0, 2.0, 3.0, 4.0]);
        let c1 = g.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c1.shape(), &[1, 4]);
        assert_eq!(c1.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn mean_axis_pooling() {
        let mut g = Graph::new();
        let x = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let y = g.mean_axis(&x, 1, false).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.data(), &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn detached_row_max_values() {
        let x = t(&[2, 3], &[1.0, 5.0, 2.0, -4.0, -6.0, -5.0]);
        let m = detached_row_max(&x);
        assert_eq!(m.shape(), &[2, 1]);
        assert_eq!(m.data(), &[5.0, -4.0]);
        assert!(!m.needs_grad());
    }
}
