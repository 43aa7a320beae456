//! Forward and backward kernels on raw buffers. The tape in `autodiff` and
//! the inference paths in `quantizer` both call into these, so training and
//! test-time evaluation share one numerical implementation.

use crate::error::{arg_err, dim_err, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
        }
    }

    /// floor((size + 2·padding − dilation·(k−1) − 1)/stride) + 1
    pub fn out_size(&self, size: usize, k: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 || k == 0 {
            return Err(arg_err(
                "conv2d",
                "stride, dilation and kernel must be positive",
            ));
        }
        let span = self.dilation * (k - 1) + 1;
        let padded = size + 2 * self.padding;
        if padded < span {
            return Err(dim_err(
                "conv2d",
                format!(
                    "input extent {size} (+2·{}) smaller than kernel span {span}",
                    self.padding
                ),
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

/// Per-image shape bookkeeping for conv2d.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    pub fn infer(input: &[usize], weight: &[usize], geom: ConvGeom) -> Result<Self> {
        if input.len() != 4 {
            return Err(dim_err(
                "conv2d",
                format!("input must be [B,C,H,W], got {input:?}"),
            ));
        }
        if weight.len() != 4 || weight[2] != weight[3] {
            return Err(dim_err(
                "conv2d",
                format!("weight must be [O,C,k,k], got {weight:?}"),
            ));
        }
        if weight[1] != input[1] {
            return Err(dim_err(
                "conv2d",
                format!(
                    "channel axis: input has {} channels, weight expects {}",
                    input[1], weight[1]
                ),
            ));
        }
        let k = weight[2];
        Ok(Self {
            batch: input[0],
            in_ch: input[1],
            h: input[2],
            w: input[3],
            out_ch: weight[0],
            k,
            oh: geom.out_size(input[2], k)?,
            ow: geom.out_size(input[3], k)?,
            geom,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output positions `o` in `[lo, hi)` whose source `o·s − p + off` lies in
/// `[0, size)`.
fn valid_span(off: isize, s: isize, p: isize, size: usize, out: usize) -> (usize, usize) {
    let shift = p - off;
    let lo = if shift <= 0 { 0 } else { (shift + s - 1) / s };
    let last = size as isize - 1 + shift;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = (lo as usize).min(out);
    (lo, (hi as usize).clamp(lo, out))
}

fn im2col<T: Real>(img: &[T], d: &ConvDims, cols: &mut [T]) {
    let (k, s, p, dil) = (
        d.k,
        d.geom.stride as isize,
        d.geom.padding as isize,
        d.geom.dilation as isize,
    );
    let npix = d.out_pixels();
    for c in 0..d.in_ch {
        let plane = &img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..k {
            let (y_lo, y_hi) = valid_span(ki as isize * dil, s, p, d.h, d.oh);
            for kj in 0..k {
                let off = kj as isize * dil;
                let (x_lo, x_hi) = valid_span(off, s, p, d.w, d.ow);
                let row = (c * k + ki) * k + kj;
                let out = &mut cols[row * npix..(row + 1) * npix];
                out[..y_lo * d.ow].fill(T::zero());
                out[y_hi * d.ow..].fill(T::zero());
                for oy in y_lo..y_hi {
                    let iy = (oy as isize * s - p + ki as isize * dil) as usize;
                    let src = &plane[iy * d.w..(iy + 1) * d.w];
                    let dst = &mut out[oy * d.ow..(oy + 1) * d.ow];
                    dst[..x_lo].fill(T::zero());
                    dst[x_hi..].fill(T::zero());
                    if x_lo == x_hi {
                        continue;
                    }
                    let ix0 = (x_lo as isize * s - p + off) as usize;
                    if s == 1 {
                        dst[x_lo..x_hi].copy_from_slice(&src[ix0..ix0 + (x_hi - x_lo)]);
                    } else {
                        for (v, &x) in dst[x_lo..x_hi]
                            .iter_mut()
                            .zip(src[ix0..].iter().step_by(s as usize))
                        {
                            *v = x;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], d: &ConvDims, img: &mut [T]) {
    let (k, s, p, dil) = (
        d.k,
        d.geom.stride as isize,
        d.geom.padding as isize,
        d.geom.dilation as isize,
    );
    let npix = d.out_pixels();
    for c in 0..d.in_ch {
        let plane = &mut img[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..k {
            let (y_lo, y_hi) = valid_span(ki as isize * dil, s, p, d.h, d.oh);
            for kj in 0..k {
                let off = kj as isize * dil;
                let (x_lo, x_hi) = valid_span(off, s, p, d.w, d.ow);
                if x_lo == x_hi {
                    continue;
                }
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in y_lo..y_hi {
                    let iy = (oy as isize * s - p + ki as isize * dil) as usize;
                    let dst = &mut plane[iy * d.w..(iy + 1) * d.w];
                    let ix0 = (x_lo as isize * s - p + off) as usize;
                    let from = &src[oy * d.ow + x_lo..oy * d.ow + x_hi];
                    if s == 1 {
                        dst[ix0..ix0 + from.len()]
                            .iter_mut()
                            .zip(from)
                            .for_each(|(a, &b)| *a += b);
                    } else {
                        for (a, &b) in dst[ix0..].iter_mut().step_by(s as usize).zip(from) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
) -> Vec<T> {
    let npix = d.out_pixels();
    let rows = d.col_rows();
    let in_sz = d.in_ch * d.h * d.w;
    let out_sz = d.out_ch * npix;
    let mut out = vec![T::zero(); d.batch * out_sz];
    let mut cols = vec![T::zero(); rows * npix];
    for b in 0..d.batch {
        im2col(&input[b * in_sz..(b + 1) * in_sz], d, &mut cols);
        let o = &mut out[b * out_sz..(b + 1) * out_sz];
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                o[oc * npix..(oc + 1) * npix].fill(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            d.out_ch,
            rows,
            npix,
            T::one(),
            weight,
            false,
            &cols,
            false,
            beta,
            o,
        );
    }
    out
}

/// Accumulates gradients for whichever of input/weight/bias are requested.
pub fn conv2d_backward<T: Real>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    d: &ConvDims,
    mut grad_input: Option<&mut [T]>,
    mut grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let npix = d.out_pixels();
    let rows = d.col_rows();
    let in_sz = d.in_ch * d.h * d.w;
    let out_sz = d.out_ch * npix;
    let mut cols = vec![T::zero(); rows * npix];
    for b in 0..d.batch {
        let go = &grad_out[b * out_sz..(b + 1) * out_sz];
        if let Some(gw) = grad_weight.as_deref_mut() {
            im2col(&input[b * in_sz..(b + 1) * in_sz], d, &mut cols);
            T::gemm(
                d.out_ch,
                npix,
                rows,
                T::one(),
                go,
                false,
                &cols,
                true,
                T::one(),
                gw,
            );
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            T::gemm(
                rows,
                d.out_ch,
                npix,
                T::one(),
                weight,
                true,
                go,
                false,
                T::zero(),
                &mut cols,
            );
            col2im(&cols, d, &mut gi[b * in_sz..(b + 1) * in_sz]);
        }
    }
    if let Some(gb) = grad_bias {
        for b in 0..d.batch {
            for (oc, g) in gb.iter_mut().enumerate() {
                let start = b * out_sz + oc * npix;
                *g += grad_out[start..start + npix].iter().copied().sum::<T>();
            }
        }
    }
}

pub fn upsample_forward<T: Real>(input: &[T], shape: &[usize], factor: usize) -> Vec<T> {
    let (bc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); bc * oh * ow];
    for p in 0..bc {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / factor) * w + x / factor];
            }
        }
    }
    out
}

pub fn upsample_backward<T: Real>(
    grad_out: &[T],
    shape: &[usize],
    factor: usize,
    grad_in: &mut [T],
) {
    let (bc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    for p in 0..bc {
        let src = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / factor) * w + x / factor] += src[y * ow + x];
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub fn log_softmax_rows<T: Real>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Squared Euclidean distance with eight independent accumulators so the
/// reduction vectorizes while staying deterministic.
#[inline]
pub fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        let d = *x - *y;
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `[P,D] × [N,D] -> [P,N]` matrix of squared distances.
pub fn pairwise_sq_dist<T: Real>(z: &[T], e: &[T], dim: usize) -> Vec<T> {
    let n = e.len() / dim;
    let mut out = Vec::with_capacity(z.len() / dim * n);
    for zr in z.chunks_exact(dim) {
        for er in e.chunks_exact(dim) {
            out.push(sq_dist(zr, er));
        }
    }
    out
}

/// [`pairwise_sq_dist`] through one GEMM, `‖z‖² + ‖e‖² − 2 z·e`, clamped at
/// zero. Faster but subject to cancellation when `z ≈ e`; training uses it,
/// exact identities use the direct form.
pub fn pairwise_sq_dist_gemm<T: Real>(z: &[T], e: &[T], dim: usize) -> Vec<T> {
    let (p, n) = (z.len() / dim, e.len() / dim);
    let mut out = vec![T::zero(); p * n];
    T::gemm(
        p,
        dim,
        n,
        T::c(-2.0),
        z,
        false,
        e,
        true,
        T::zero(),
        &mut out,
    );
    let en: Vec<T> = e
        .chunks_exact(dim)
        .map(|r| r.iter().map(|&v| v * v).sum())
        .collect();
    for (row, zr) in out.chunks_exact_mut(n).zip(z.chunks_exact(dim)) {
        let zn: T = zr.iter().map(|&v| v * v).sum();
        for (o, &ek) in row.iter_mut().zip(&en) {
            *o = (*o + zn + ek).max(T::zero());
        }
    }
    out
}

/// Moves the channel axis last: `[B,C,H,W] -> [B·H·W, C]`.
pub fn nchw_to_rows<T: Real>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for (p, &v) in src.iter().enumerate() {
                out[(bi * hw + p) * c + ci] = v;
            }
        }
    }
    out
}

/// Inverse of [`nchw_to_rows`].
pub fn rows_to_nchw<T: Real>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (b, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let dst = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for (p, v) in dst.iter_mut().enumerate() {
                *v = x[(bi * hw + p) * c + ci];
            }
        }
    }
    out
}
