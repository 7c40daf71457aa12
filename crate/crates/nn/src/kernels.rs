//! Raw convolution kernels on `[batch, channels, height, width]` buffers.
//!
//! All kernels are cross-correlations with explicit zero padding. Backward
//! passes accumulate into the provided gradient buffers.

use crate::scalar::Scalar;

/// Geometry of a 2-D convolution over one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Output extent for "same" padding: `ceil(len / stride)`.
pub fn same_pad(k: usize) -> usize {
    k / 2
}

/// Range of output positions `o` with `0 <= o*stride + off - pad < in_len`.
#[inline]
fn valid_range(off: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let off = off as isize;
    let pad = pad as isize;
    let s = stride as isize;
    let lo = if pad > off { (pad - off + s - 1) / s } else { 0 };
    let hi_incl = (in_len as isize - 1 + pad - off).div_euclid(s);
    let hi = (hi_incl + 1).clamp(0, out_len as isize);
    (lo.min(hi) as usize, hi as usize)
}

/// Unrolls one image `[in_ch, h, w]` into `[in_ch * k * k, oh * ow]` patch
/// rows; out-of-bounds taps are zero.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let op = oh * ow;
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(ky, g.pad, g.stride, g.h, oh);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(kx, g.pad, g.stride, g.w, ow);
                let r = (c * g.k + ky) * g.k + kx;
                let row = &mut cols[r * op..(r + 1) * op];
                for oy in 0..oh {
                    let orow = &mut row[oy * ow..(oy + 1) * ow];
                    if oy < ylo || oy >= yhi {
                        orow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let irow = &plane[iy * g.w..(iy + 1) * g.w];
                    orow[..xlo].iter_mut().for_each(|v| *v = T::zero());
                    orow[xhi..].iter_mut().for_each(|v| *v = T::zero());
                    for ox in xlo..xhi {
                        orow[ox] = irow[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the image.
fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let op = oh * ow;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(ky, g.pad, g.stride, g.h, oh);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(kx, g.pad, g.stride, g.w, ow);
                let r = (c * g.k + ky) * g.k + kx;
                let row = &cols[r * op..(r + 1) * op];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let crow = &row[oy * ow..(oy + 1) * ow];
                    for ox in xlo..xhi {
                        drow[ox * g.stride + kx - g.pad] += crow[ox];
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with four independent accumulators so the reduction can
/// be pipelined; the summation order is fixed, so results are reproducible.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Standard convolution via patch unrolling; weights `[out, in, k, k]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let op = g.out_h() * g.out_w();
    let ck = g.in_ch * g.k * g.k;
    let mut out = vec![T::zero(); g.batch * g.out_ch * op];
    let mut cols = vec![T::zero(); ck * op];
    let in_len = g.in_ch * g.h * g.w;
    for b in 0..g.batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        let ob = &mut out[b * g.out_ch * op..(b + 1) * g.out_ch * op];
        for (o, orow) in ob.chunks_mut(op).enumerate() {
            for (r, &wv) in w[o * ck..(o + 1) * ck].iter().enumerate() {
                if wv != T::zero() {
                    axpy(orow, wv, &cols[r * op..(r + 1) * op]);
                }
            }
        }
    }
    out
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let op = g.out_h() * g.out_w();
    let ck = g.in_ch * g.k * g.k;
    let in_len = g.in_ch * g.h * g.w;
    let mut cols = vec![T::zero(); ck * op];
    let mut dcols = vec![T::zero(); if dx.is_some() { ck * op } else { 0 }];
    for b in 0..g.batch {
        let dyb = &dy[b * g.out_ch * op..(b + 1) * g.out_ch * op];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
            for (o, drow) in dyb.chunks(op).enumerate() {
                for (r, d) in dw[o * ck..(o + 1) * ck].iter_mut().enumerate() {
                    *d += dot(drow, &cols[r * op..(r + 1) * op]);
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.iter_mut().for_each(|v| *v = T::zero());
            for (o, drow) in dyb.chunks(op).enumerate() {
                for (r, &wv) in w[o * ck..(o + 1) * ck].iter().enumerate() {
                    axpy(&mut dcols[r * op..(r + 1) * op], wv, drow);
                }
            }
            col2im_add(&dcols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
}

/// Per-channel convolution; `in_ch == out_ch`, weights `[ch, k, k]`.
pub fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    debug_assert_eq!(g.in_ch, g.out_ch);
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.batch * g.in_ch * oh * ow];
    let kk = g.k * g.k;
    for b in 0..g.batch {
        for c in 0..g.in_ch {
            let ob = (b * g.in_ch + c) * oh * ow;
            let xb = (b * g.in_ch + c) * g.h * g.w;
            for ky in 0..g.k {
                let (ylo, yhi) = valid_range(ky, g.pad, g.stride, g.h, oh);
                for kx in 0..g.k {
                    let wv = w[c * kk + ky * g.k + kx];
                    let (xlo, xhi) = valid_range(kx, g.pad, g.stride, g.w, ow);
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut out[ob + oy * ow..ob + oy * ow + ow];
                        let irow = &x[xb + iy * g.w..xb + iy * g.w + g.w];
                        if g.stride == 1 {
                            let shift = kx as isize - g.pad as isize;
                            for ox in xlo..xhi {
                                orow[ox] += wv * irow[(ox as isize + shift) as usize];
                            }
                        } else {
                            for ox in xlo..xhi {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let kk = g.k * g.k;
    let mut dx = dx;
    let mut dw = dw;
    for b in 0..g.batch {
        for c in 0..g.in_ch {
            let ob = (b * g.in_ch + c) * oh * ow;
            let xb = (b * g.in_ch + c) * g.h * g.w;
            for ky in 0..g.k {
                let (ylo, yhi) = valid_range(ky, g.pad, g.stride, g.h, oh);
                for kx in 0..g.k {
                    let wv = w[c * kk + ky * g.k + kx];
                    let (xlo, xhi) = valid_range(kx, g.pad, g.stride, g.w, ow);
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let drow = &dy[ob + oy * ow..ob + oy * ow + ow];
                        let ioff = xb + iy * g.w;
                        if let Some(dx) = dx.as_deref_mut() {
                            let dxrow = &mut dx[ioff..ioff + g.w];
                            for ox in xlo..xhi {
                                dxrow[ox * g.stride + kx - g.pad] += wv * drow[ox];
                            }
                        }
                        let irow = &x[ioff..ioff + g.w];
                        for ox in xlo..xhi {
                            acc += drow[ox] * irow[ox * g.stride + kx - g.pad];
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[c * kk + ky * g.k + kx] += acc;
                    }
                }
            }
        }
    }
}

/// 1x1 convolution, weights `[out_ch, in_ch]`, `plane = h * w`.
pub fn pointwise_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    plane: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * out_ch * plane];
    for b in 0..batch {
        let xs = &x[b * in_ch * plane..(b + 1) * in_ch * plane];
        let ys = &mut out[b * out_ch * plane..(b + 1) * out_ch * plane];
        for o in 0..out_ch {
            let yrow = &mut ys[o * plane..(o + 1) * plane];
            for c in 0..in_ch {
                let wv = w[o * in_ch + c];
                let xrow = &xs[c * plane..(c + 1) * plane];
                for (y, &xv) in yrow.iter_mut().zip(xrow) {
                    *y += wv * xv;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn pointwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    plane: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    for b in 0..batch {
        let xs = &x[b * in_ch * plane..(b + 1) * in_ch * plane];
        let dys = &dy[b * out_ch * plane..(b + 1) * out_ch * plane];
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[b * in_ch * plane..(b + 1) * in_ch * plane];
            for o in 0..out_ch {
                let drow = &dys[o * plane..(o + 1) * plane];
                for c in 0..in_ch {
                    let wv = w[o * in_ch + c];
                    let dxrow = &mut dxs[c * plane..(c + 1) * plane];
                    for (d, &g) in dxrow.iter_mut().zip(drow) {
                        *d += wv * g;
                    }
                }
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            for o in 0..out_ch {
                let drow = &dys[o * plane..(o + 1) * plane];
                for c in 0..in_ch {
                    dw[o * in_ch + c] += dot(drow, &xs[c * plane..(c + 1) * plane]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_same_padding() {
        // k=3, pad=1, stride=1, len 5: offset 0 excludes o=0, offset 2 excludes o=4
        assert_eq!(valid_range(0, 1, 1, 5, 5), (1, 5));
        assert_eq!(valid_range(1, 1, 1, 5, 5), (0, 5));
        assert_eq!(valid_range(2, 1, 1, 5, 5), (0, 4));
        // stride 2, len 6 -> out 3
        assert_eq!(valid_range(0, 1, 2, 6, 3), (1, 3));
        assert_eq!(valid_range(2, 1, 2, 6, 3), (0, 3));
    }

    #[test]
    fn identity_kernel_1x1() {
        let g = ConvGeom { batch: 1, in_ch: 1, out_ch: 1, h: 1, w: 1, k: 1, stride: 1, pad: 0 };
        let y = conv2d_forward(&[3.5f64], &[1.0], &g);
        assert_eq!(y, vec![3.5]);
    }

    #[test]
    fn naive_reference_matches() {
        let g = ConvGeom { batch: 2, in_ch: 2, out_ch: 3, h: 5, w: 4, k: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..g.batch * g.in_ch * g.h * g.w).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let w: Vec<f64> = (0..g.out_ch * g.in_ch * 9).map(|i| ((i * 3 % 5) as f64) - 2.0).collect();
        let y = conv2d_forward(&x, &w, &g);
        let (oh, ow) = (g.out_h(), g.out_w());
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for c in 0..g.in_ch {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    s += w[((o * g.in_ch + c) * 3 + ky) * 3 + kx]
                                        * x[((b * g.in_ch + c) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        assert_eq!(y[((b * g.out_ch + o) * oh + oy) * ow + ox], s);
                    }
                }
            }
        }
    }
}
