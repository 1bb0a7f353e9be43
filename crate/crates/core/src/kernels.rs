//! Forward and backward kernels for the grid operators.
//!
//! All kernels work on raw row-major slices in the `[k, c, h, w]` layout and
//! treat the member axis as a batch axis.

use crate::scalar::Scalar;

/// Side length of the embedding convolution kernel.
pub const KERNEL: usize = 5;
const HALF: usize = KERNEL / 2;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims4 {
    pub k: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn from_shape(shape: &[usize]) -> Self {
        Self {
            k: shape[0],
            c: shape[1],
            h: shape[2],
            w: shape[3],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// `out[i,m,:] = sum_c x[i,c,:] * w[c,m]`.
pub(crate) fn project_forward<T: Scalar>(x: &[T], d: Dims4, w: &[T], c_out: usize) -> Vec<T> {
    let p = d.plane();
    let mut out = vec![T::zero(); d.k * c_out * p];
    for i in 0..d.k {
        for c in 0..d.c {
            let src = &x[(i * d.c + c) * p..(i * d.c + c + 1) * p];
            for m in 0..c_out {
                let wt = w[c * c_out + m];
                if wt == T::zero() {
                    continue;
                }
                let dst = &mut out[(i * c_out + m) * p..(i * c_out + m + 1) * p];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += wt * s;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw)` for [`project_forward`].
pub(crate) fn project_backward<T: Scalar>(
    x: &[T],
    d: Dims4,
    w: &[T],
    c_out: usize,
    gout: &[T],
) -> (Vec<T>, Vec<T>) {
    let p = d.plane();
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for i in 0..d.k {
        for c in 0..d.c {
            let xs = &x[(i * d.c + c) * p..(i * d.c + c + 1) * p];
            let dxs = &mut dx[(i * d.c + c) * p..(i * d.c + c + 1) * p];
            for m in 0..c_out {
                let g = &gout[(i * c_out + m) * p..(i * c_out + m + 1) * p];
                let wt = w[c * c_out + m];
                let mut acc = T::zero();
                for ((dxv, &gv), &xv) in dxs.iter_mut().zip(g).zip(xs) {
                    *dxv += wt * gv;
                    acc += gv * xv;
                }
                dw[c * c_out + m] += acc;
            }
        }
    }
    (dx, dw)
}

/// `dst[x] += wt * src[(x + shift) mod w]`.
#[inline]
fn add_shifted<T: Scalar>(dst: &mut [T], src: &[T], shift: usize, wt: T) {
    let w = dst.len();
    let (head, tail) = dst.split_at_mut(w - shift);
    for (o, &s) in head.iter_mut().zip(&src[shift..]) {
        *o += wt * s;
    }
    for (o, &s) in tail.iter_mut().zip(&src[..shift]) {
        *o += wt * s;
    }
}

/// `sum_x a[x] * b[(x + shift) mod w]`.
#[inline]
fn dot_shifted<T: Scalar>(a: &[T], b: &[T], shift: usize) -> T {
    let w = a.len();
    let mut acc = T::zero();
    for (&x, &y) in a[..w - shift].iter().zip(&b[shift..]) {
        acc += x * y;
    }
    for (&x, &y) in a[w - shift..].iter().zip(&b[..shift]) {
        acc += x * y;
    }
    acc
}

/// `dst[(x + shift) mod w] += wt * src[x]`.
#[inline]
fn scatter_shifted<T: Scalar>(dst: &mut [T], src: &[T], shift: usize, wt: T) {
    let w = dst.len();
    let (head, tail) = dst.split_at_mut(shift);
    for (o, &s) in tail.iter_mut().zip(&src[..w - shift]) {
        *o += wt * s;
    }
    for (o, &s) in head.iter_mut().zip(&src[w - shift..]) {
        *o += wt * s;
    }
}

#[inline]
fn lon_shift(dx: usize, w: usize) -> usize {
    (dx as isize - HALF as isize).rem_euclid(w as isize) as usize
}

#[inline]
fn lat_source(y: usize, dy: usize, h: usize) -> Option<usize> {
    let src = y as isize + dy as isize - HALF as isize;
    (src >= 0 && src < h as isize).then_some(src as usize)
}

/// 5x5 cross-correlation, periodic in longitude, zero-padded in latitude.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    d: Dims4,
    kernel: &[T],
    bias: &[T],
    c_out: usize,
) -> Vec<T> {
    let p = d.plane();
    let kk = KERNEL * KERNEL;
    let mut out = vec![T::zero(); d.k * c_out * p];
    for i in 0..d.k {
        for o in 0..c_out {
            let dst = &mut out[(i * c_out + o) * p..(i * c_out + o + 1) * p];
            dst.iter_mut().for_each(|v| *v = bias[o]);
            for ci in 0..d.c {
                let src = &x[(i * d.c + ci) * p..(i * d.c + ci + 1) * p];
                let kern = &kernel[(o * d.c + ci) * kk..(o * d.c + ci + 1) * kk];
                for y in 0..d.h {
                    let row = &mut dst[y * d.w..(y + 1) * d.w];
                    for dy in 0..KERNEL {
                        let Some(ys) = lat_source(y, dy, d.h) else {
                            continue;
                        };
                        let srow = &src[ys * d.w..(ys + 1) * d.w];
                        for dx in 0..KERNEL {
                            let wt = kern[dy * KERNEL + dx];
                            add_shifted(row, srow, lon_shift(dx, d.w), wt);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dkernel, dbias)` for [`conv_forward`].
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    d: Dims4,
    kernel: &[T],
    c_out: usize,
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let p = d.plane();
    let kk = KERNEL * KERNEL;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernel.len()];
    let mut db = vec![T::zero(); c_out];
    for i in 0..d.k {
        for o in 0..c_out {
            let g = &gout[(i * c_out + o) * p..(i * c_out + o + 1) * p];
            db[o] += g.iter().copied().sum::<T>();
            for ci in 0..d.c {
                let src = &x[(i * d.c + ci) * p..(i * d.c + ci + 1) * p];
                let dsrc = &mut dx[(i * d.c + ci) * p..(i * d.c + ci + 1) * p];
                let kbase = (o * d.c + ci) * kk;
                for y in 0..d.h {
                    let grow = &g[y * d.w..(y + 1) * d.w];
                    for dy in 0..KERNEL {
                        let Some(ys) = lat_source(y, dy, d.h) else {
                            continue;
                        };
                        let srow = &src[ys * d.w..(ys + 1) * d.w];
                        let drow = &mut dsrc[ys * d.w..(ys + 1) * d.w];
                        for ddx in 0..KERNEL {
                            let s = lon_shift(ddx, d.w);
                            let ki = kbase + dy * KERNEL + ddx;
                            dk[ki] += dot_shifted(grow, srow, s);
                            scatter_shifted(drow, grow, s, kernel[ki]);
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// Per-member normalization over `(c, h, w)` followed by a per-channel affine.
///
/// Returns the output together with the per-member mean and reciprocal std.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    d: Dims4,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let p = d.plane();
    let n = d.c * p;
    let nt = T::from_usize(n).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(d.k);
    let mut rstds = Vec::with_capacity(d.k);
    for i in 0..d.k {
        let xs = &x[i * n..(i + 1) * n];
        let mean = xs.iter().copied().sum::<T>() / nt;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
        let rstd = T::one() / (var + eps).sqrt();
        let os = &mut out[i * n..(i + 1) * n];
        for c in 0..d.c {
            for j in c * p..(c + 1) * p {
                os[j] = (xs[j] - mean) * rstd * gain[c] + bias[c];
            }
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Returns `(dx, dgain, dbias)` for [`layer_norm_forward`].
pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &[T],
    d: Dims4,
    gain: &[T],
    means: &[T],
    rstds: &[T],
    gout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let p = d.plane();
    let n = d.c * p;
    let nt = T::from_usize(n).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![T::zero(); d.c];
    let mut dbias = vec![T::zero(); d.c];
    let mut dxhat = vec![T::zero(); n];
    for i in 0..d.k {
        let xs = &x[i * n..(i + 1) * n];
        let gs = &gout[i * n..(i + 1) * n];
        let (mean, rstd) = (means[i], rstds[i]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for c in 0..d.c {
            for j in c * p..(c + 1) * p {
                let xhat = (xs[j] - mean) * rstd;
                dgain[c] += gs[j] * xhat;
                dbias[c] += gs[j];
                dxhat[j] = gs[j] * gain[c];
                sum_dxhat += dxhat[j];
                sum_dxhat_xhat += dxhat[j] * xhat;
            }
        }
        let m1 = sum_dxhat / nt;
        let m2 = sum_dxhat_xhat / nt;
        let dxs = &mut dx[i * n..(i + 1) * n];
        for j in 0..n {
            let xhat = (xs[j] - mean) * rstd;
            dxs[j] = rstd * (dxhat[j] - m1 - xhat * m2);
        }
    }
    (dx, dgain, dbias)
}
