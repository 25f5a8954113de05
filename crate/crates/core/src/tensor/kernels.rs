//! Low-level compute kernels shared by the forward and backward passes.
//!
//! All kernels are deterministic: parallelism only ever splits work across
//! disjoint output rows, and every output element is produced by one thread
//! with a fixed sequential reduction order. Results are bitwise identical
//! regardless of thread count.

use super::Scalar;
use rayon::prelude::*;

/// Below this many multiply-adds a kernel stays single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

/// out[m,n] += a[m,k] * b[k,n]
pub fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [T]| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
}

/// out[n,m] = a[m,n] transposed.
pub fn transpose2d<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// im2col for a [ci, h, w] image: output is [ci*kh*kw, ho*wo] where each
/// column holds the receptive field of one output pixel (zero outside).
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); ci * kh * kw * ho * wo];
    let cols_w = ho * wo;
    for c in 0..ci {
        for u in 0..kh {
            for v in 0..kw {
                let r = (c * kh + u) * kw + v;
                let dst = &mut cols[r * cols_w..(r + 1) * cols_w];
                for oy in 0..ho {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back onto the [ci, h, w] image.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<T: Scalar>(
    cols: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [T],
) {
    let cols_w = ho * wo;
    for c in 0..ci {
        for u in 0..kh {
            for v in 0..kw {
                let r = (c * kh + u) * kw + v;
                let src = &cols[r * cols_w..(r + 1) * cols_w];
                for oy in 0..ho {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row =
                        &mut out[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major index helpers for arbitrary-rank reshuffles.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permute axes of `x` (row-major, shape `shape`), returning the permuted
/// buffer; `out_shape` is shape permuted by `axes`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![T::zero(); x.len()];
    // Walk output in order, mapping each index back through the permutation.
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[axes[d]];
        }
        *o = x[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub fn softmax_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    let f = |(xr, yr): (&[T], &mut [T])| {
        let mut mx = xr[0];
        for &v in xr.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (y, &v) in yr.iter_mut().zip(xr.iter()) {
            let e = (v - mx).exp();
            *y = e;
            sum = sum + e;
        }
        for y in yr.iter_mut() {
            *y = *y / sum;
        }
    };
    if rows * cols >= PAR_THRESHOLD && rows > 1 {
        x.par_chunks(cols).zip(out.par_chunks_mut(cols)).for_each(f);
    } else {
        x.chunks(cols).zip(out.chunks_mut(cols)).for_each(f);
    }
}

pub fn gelu_val<T: Scalar>(x: T) -> T {
    // tanh approximation; the backward pass differentiates this exact form.
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let dinner = c * (T::one() + T::from_f64(3.0) * a * x * x);
    half * (T::one() + t) + half * x * sech2 * dinner
}

/// Numerically stable log(1 + e^x).
pub fn softplus_val<T: Scalar>(x: T) -> T {
    let z = if x > T::zero() { x } else { T::zero() };
    z + ((x - z).exp() + (-z).exp()).ln()
}

pub fn sigmoid_val<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
