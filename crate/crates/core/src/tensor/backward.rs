//! Vector-Jacobian products for every primitive.
//!
//! Forward validation already ran, so shapes are trusted here. Inputs whose
//! `needs` flag is false get `None`; everything else is an owned gradient
//! buffer of the input's shape.

use super::kernels;
use super::tape::Primitive;
use super::{Scalar, Tensor};
use crate::error::Result;

pub(crate) fn vjp<T: Scalar>(
    prim: &Primitive,
    xs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &[T],
    needs: &[bool],
) -> Result<Vec<Option<Vec<T>>>> {
    let mut gins: Vec<Option<Vec<T>>> = vec![None; xs.len()];
    match prim {
        Primitive::Matmul => {
            let (a, b) = (xs[0], xs[1]);
            let ([batches, m, k, n], batched) = match (a.shape(), b.shape()) {
                ([m, k], [_, n]) => ([1, *m, *k, *n], false),
                ([ba, m, k], [_, _, n]) => ([*ba, *m, *k, *n], true),
                _ => unreachable!(),
            };
            let _ = batched;
            if needs[0] {
                let mut da = vec![T::zero(); a.numel()];
                for i in 0..batches {
                    let bt = kernels::transpose2d(&b.data()[i * k * n..(i + 1) * k * n], k, n);
                    kernels::mm(
                        &g[i * m * n..(i + 1) * m * n],
                        &bt,
                        m,
                        n,
                        k,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                gins[0] = Some(da);
            }
            if needs[1] {
                let mut db = vec![T::zero(); b.numel()];
                for i in 0..batches {
                    let at = kernels::transpose2d(&a.data()[i * m * k..(i + 1) * m * k], m, k);
                    kernels::mm(
                        &at,
                        &g[i * m * n..(i + 1) * m * n],
                        k,
                        m,
                        n,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                gins[1] = Some(db);
            }
        }
        Primitive::Conv2d { stride, pad } => {
            let (x, w) = (xs[0], xs[1]);
            let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
            let (ho, wo) = (out.shape()[1], out.shape()[2]);
            let ckk = ci * kh * kw;
            let howo = ho * wo;
            if needs[0] {
                let wt = kernels::transpose2d(w.data(), co, ckk);
                let mut dcols = vec![T::zero(); ckk * howo];
                kernels::mm(&wt, g, ckk, co, howo, &mut dcols);
                let mut dx = vec![T::zero(); x.numel()];
                kernels::col2im_add(&dcols, ci, h, wd, kh, kw, *stride, *pad, ho, wo, &mut dx);
                gins[0] = Some(dx);
            }
            if needs[1] {
                let cols = kernels::im2col(x.data(), ci, h, wd, kh, kw, *stride, *pad, ho, wo);
                let colst = kernels::transpose2d(&cols, ckk, howo);
                let mut dw = vec![T::zero(); w.numel()];
                kernels::mm(g, &colst, co, howo, ckk, &mut dw);
                gins[1] = Some(dw);
            }
            if needs[2] {
                let mut db = vec![T::zero(); co];
                for o in 0..co {
                    let mut s = T::zero();
                    for &v in &g[o * howo..(o + 1) * howo] {
                        s = s + v;
                    }
                    db[o] = s;
                }
                gins[2] = Some(db);
            }
        }
        Primitive::Upsample2xNearest => {
            if needs[0] {
                let x = xs[0];
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let wo = 2 * w;
                let mut dx = vec![T::zero(); x.numel()];
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let base = ch * 4 * h * w;
                            let s = g[base + (2 * i) * wo + 2 * j]
                                + g[base + (2 * i) * wo + 2 * j + 1]
                                + g[base + (2 * i + 1) * wo + 2 * j]
                                + g[base + (2 * i + 1) * wo + 2 * j + 1];
                            dx[(ch * h + i) * w + j] = s;
                        }
                    }
                }
                gins[0] = Some(dx);
            }
        }
        Primitive::Maxpool2d { k } => {
            if needs[0] {
                let x = xs[0];
                let (c, h, w) = match x.shape() {
                    [c, h, w] => (*c, *h, *w),
                    [h, w] => (1, *h, *w),
                    _ => unreachable!(),
                };
                let (ho, wo) = (h / k, w / k);
                let mut dx = vec![T::zero(); x.numel()];
                // Route to the first maximum in scan order, matching forward.
                for ch in 0..c {
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut m = x.data()[(ch * h + i * k) * w + j * k];
                            let mut arg = (ch * h + i * k) * w + j * k;
                            for u in 0..*k {
                                for v in 0..*k {
                                    let idx = (ch * h + i * k + u) * w + j * k + v;
                                    if x.data()[idx] > m {
                                        m = x.data()[idx];
                                        arg = idx;
                                    }
                                }
                            }
                            dx[arg] = dx[arg] + g[(ch * ho + i) * wo + j];
                        }
                    }
                }
                gins[0] = Some(dx);
            }
        }
        Primitive::SoftmaxLastDim => {
            if needs[0] {
                let cols = *out.shape().last().unwrap();
                let rows = out.numel() / cols;
                let y = out.data();
                let mut dx = vec![T::zero(); out.numel()];
                for r in 0..rows {
                    let off = r * cols;
                    let mut dot = T::zero();
                    for j in 0..cols {
                        dot = dot + g[off + j] * y[off + j];
                    }
                    for j in 0..cols {
                        dx[off + j] = y[off + j] * (g[off + j] - dot);
                    }
                }
                gins[0] = Some(dx);
            }
        }
        Primitive::LayerNormLastDim { eps } => {
            let (x, gamma) = (xs[0], xs[1]);
            let c = *x.shape().last().unwrap();
            let rows = x.numel() / c;
            let eps = T::from_f64(*eps);
            let cn = T::from_f64(c as f64);
            let mut dx = needs[0].then(|| vec![T::zero(); x.numel()]);
            let mut dgamma = needs[1].then(|| vec![T::zero(); c]);
            let mut dbeta = needs[2].then(|| vec![T::zero(); c]);
            let mut xhat = vec![T::zero(); c];
            for r in 0..rows {
                let xr = &x.data()[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let mut mean = T::zero();
                for &v in xr {
                    mean = mean + v;
                }
                mean = mean / cn;
                let mut var = T::zero();
                for &v in xr {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / cn;
                let inv = T::one() / (var + eps).sqrt();
                for j in 0..c {
                    xhat[j] = (xr[j] - mean) * inv;
                }
                if let Some(dg) = dgamma.as_mut() {
                    for j in 0..c {
                        dg[j] = dg[j] + gr[j] * xhat[j];
                    }
                }
                if let Some(db) = dbeta.as_mut() {
                    for j in 0..c {
                        db[j] = db[j] + gr[j];
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let mut gy_mean = T::zero();
                    let mut gyx_mean = T::zero();
                    for j in 0..c {
                        let gy = gr[j] * gamma.data()[j];
                        gy_mean = gy_mean + gy;
                        gyx_mean = gyx_mean + gy * xhat[j];
                    }
                    gy_mean = gy_mean / cn;
                    gyx_mean = gyx_mean / cn;
                    for j in 0..c {
                        let gy = gr[j] * gamma.data()[j];
                        dx[r * c + j] = inv * (gy - gy_mean - xhat[j] * gyx_mean);
                    }
                }
            }
            gins[0] = dx;
            gins[1] = dgamma;
            gins[2] = dbeta;
        }
        Primitive::Linear => {
            let (x, w) = (xs[0], xs[1]);
            let (ci, co) = (w.shape()[0], w.shape()[1]);
            let rows = x.numel() / ci;
            if needs[0] {
                let wt = kernels::transpose2d(w.data(), ci, co);
                let mut dx = vec![T::zero(); x.numel()];
                kernels::mm(g, &wt, rows, co, ci, &mut dx);
                gins[0] = Some(dx);
            }
            if needs[1] {
                let xt = kernels::transpose2d(x.data(), rows, ci);
                let mut dw = vec![T::zero(); w.numel()];
                kernels::mm(&xt, g, ci, rows, co, &mut dw);
                gins[1] = Some(dw);
            }
            if needs[2] {
                let mut db = vec![T::zero(); co];
                for r in 0..rows {
                    for j in 0..co {
                        db[j] = db[j] + g[r * co + j];
                    }
                }
                gins[2] = Some(db);
            }
        }
        Primitive::Relu => {
            if needs[0] {
                let x = xs[0];
                gins[0] = Some(
                    x.data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                );
            }
        }
        Primitive::Gelu => {
            if needs[0] {
                let x = xs[0];
                gins[0] = Some(
                    x.data().iter().zip(g).map(|(&v, &gv)| gv * kernels::gelu_grad(v)).collect(),
                );
            }
        }
        Primitive::Add => {
            if needs[0] {
                gins[0] = Some(g.to_vec());
            }
            if needs[1] {
                gins[1] = Some(g.to_vec());
            }
        }
        Primitive::Sub => {
            if needs[0] {
                gins[0] = Some(g.to_vec());
            }
            if needs[1] {
                gins[1] = Some(g.iter().map(|&v| -v).collect());
            }
        }
        Primitive::Mul => {
            let (a, b) = (xs[0], xs[1]);
            if needs[0] {
                gins[0] = Some(b.data().iter().zip(g).map(|(&bv, &gv)| bv * gv).collect());
            }
            if needs[1] {
                gins[1] = Some(a.data().iter().zip(g).map(|(&av, &gv)| av * gv).collect());
            }
        }
        Primitive::ConcatChannels => {
            let mut off = 0;
            for (i, x) in xs.iter().enumerate() {
                let n = x.numel();
                if needs[i] {
                    gins[i] = Some(g[off..off + n].to_vec());
                }
                off += n;
            }
        }
        Primitive::Reshape { .. } => {
            if needs[0] {
                gins[0] = Some(g.to_vec());
            }
        }
        Primitive::Permute { axes } => {
            if needs[0] {
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                gins[0] = Some(kernels::permute(g, out.shape(), &inv));
            }
        }
        Primitive::PadZero { pad } => {
            if needs[0] {
                let x = xs[0];
                let out_strides = kernels::strides_of(out.shape());
                let base: usize = pad.iter().zip(&out_strides).map(|(&(b, _), &s)| b * s).sum();
                let mut dx = Vec::with_capacity(x.numel());
                let mut idx = vec![0usize; x.rank()];
                for _ in 0..x.numel() {
                    let mut src = base;
                    for d in 0..x.rank() {
                        src += idx[d] * out_strides[d];
                    }
                    dx.push(g[src]);
                    for d in (0..x.rank()).rev() {
                        idx[d] += 1;
                        if idx[d] < x.shape()[d] {
                            break;
                        }
                        idx[d] = 0;
                    }
                }
                gins[0] = Some(dx);
            }
        }
        Primitive::Slice { ranges } => {
            if needs[0] {
                let x = xs[0];
                let in_strides = kernels::strides_of(x.shape());
                let base: usize =
                    ranges.iter().zip(&in_strides).map(|(&(s, _), &st)| s * st).sum();
                let mut dx = vec![T::zero(); x.numel()];
                let mut idx = vec![0usize; x.rank()];
                for &gv in g {
                    let mut dst = base;
                    for d in 0..x.rank() {
                        dst += idx[d] * in_strides[d];
                    }
                    dx[dst] = gv;
                    for d in (0..x.rank()).rev() {
                        idx[d] += 1;
                        if idx[d] < out.shape()[d] {
                            break;
                        }
                        idx[d] = 0;
                    }
                }
                gins[0] = Some(dx);
            }
        }
        Primitive::Roll2d { dh, dw } => {
            if needs[0] {
                let x = xs[0];
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut dx = vec![T::zero(); x.numel()];
                for i in 0..h {
                    let oi = (i as isize + dh).rem_euclid(h as isize) as usize;
                    for j in 0..w {
                        let oj = (j as isize + dw).rem_euclid(w as isize) as usize;
                        let src = (oi * w + oj) * c;
                        let dst = (i * w + j) * c;
                        dx[dst..dst + c].copy_from_slice(&g[src..src + c]);
                    }
                }
                gins[0] = Some(dx);
            }
        }
        Primitive::Abs => {
            if needs[0] {
                let x = xs[0];
                gins[0] = Some(
                    x.data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| {
                            if v > T::zero() {
                                gv
                            } else if v < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
        }
        Primitive::Scale { factor } => {
            if needs[0] {
                let f = T::from_f64(*factor);
                gins[0] = Some(g.iter().map(|&v| v * f).collect());
            }
        }
        Primitive::Softplus => {
            if needs[0] {
                let x = xs[0];
                gins[0] = Some(
                    x.data().iter().zip(g).map(|(&v, &gv)| gv * kernels::sigmoid_val(v)).collect(),
                );
            }
        }
        Primitive::SumAll => {
            if needs[0] {
                gins[0] = Some(vec![g[0]; xs[0].numel()]);
            }
        }
        Primitive::MeanAll => {
            if needs[0] {
                let n = T::from_f64(xs[0].numel() as f64);
                gins[0] = Some(vec![g[0] / n; xs[0].numel()]);
            }
        }
    }
    Ok(gins)
}
