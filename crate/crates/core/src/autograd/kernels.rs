//! Raw forward/backward kernels over contiguous NCHW buffers.

use crate::scalar::{gemm, Scalar, Trans};
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `(cin, h, w)` into `(cin·k·k, oh·ow)` patches, zero padded.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // valid ox satisfy 0 <= ox + kx - pad < w
                        let shift = kx as isize - g.pad as isize;
                        let lo = ((-shift).max(0) as usize).min(g.ow);
                        let hi = ((g.w as isize - shift).min(g.ow as isize)).max(lo as isize) as usize;
                        out_row[..lo].iter_mut().for_each(|v| *v = T::zero());
                        out_row[hi..].iter_mut().for_each(|v| *v = T::zero());
                        if hi > lo {
                            let s0 = (lo as isize + shift) as usize;
                            out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *o = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into `dx`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], n: usize, g: &ConvGeom, w: &[T], b: &[T], cout: usize) -> Vec<T> {
    let (rows, p) = (g.rows(), g.cols());
    let in_per = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
    for i in 0..n {
        let xi = &x[i * in_per..(i + 1) * in_per];
        let oi = &mut out[i * cout * p..(i + 1) * cout * p];
        for (co, chunk) in oi.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[co]);
        }
        let patches: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        gemm(Trans::N, Trans::N, cout, rows, p, T::one(), w, patches, T::one(), oi);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    cout: usize,
    gy: &[T],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let (rows, p) = (g.rows(), g.cols());
    let in_per = g.cin * g.h * g.w;
    let mut dx = need_x.then(|| vec![T::zero(); n * in_per]);
    let mut dw = need_w.then(|| vec![T::zero(); cout * rows]);
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); cout];
        for i in 0..n {
            for (co, d) in db.iter_mut().enumerate() {
                let s = &gy[(i * cout + co) * p..(i * cout + co + 1) * p];
                *d = s.iter().fold(*d, |acc, &v| acc + v);
            }
        }
        db
    });
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
    let mut dcols = if need_x && !g.is_pointwise() { vec![T::zero(); rows * p] } else { Vec::new() };
    for i in 0..n {
        let gi = &gy[i * cout * p..(i + 1) * cout * p];
        let xi = &x[i * in_per..(i + 1) * in_per];
        if let Some(dw) = dw.as_mut() {
            let patches: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut cols);
                &cols
            };
            gemm(Trans::N, Trans::T, cout, p, rows, T::one(), gi, patches, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * in_per..(i + 1) * in_per];
            if g.is_pointwise() {
                gemm(Trans::T, Trans::N, rows, cout, p, T::one(), w, gi, T::one(), dxi);
            } else {
                gemm(Trans::T, Trans::N, rows, cout, p, T::one(), w, gi, T::zero(), &mut dcols);
                col2im(&dcols, g, dxi);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Source index in the input for each output element of `pixel_shuffle(_, r)`.
pub(crate) fn shuffle_map(s: Shape, r: usize) -> Vec<usize> {
    let (oc, oh, ow) = (s.c / (r * r), s.h * r, s.w * r);
    let mut map = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..oc {
            for y in 0..oh {
                for x in 0..ow {
                    let (h, i) = (y / r, y % r);
                    let (w, j) = (x / r, x % r);
                    map.push(s.index(n, c * r * r + i * r + j, h, w));
                }
            }
        }
    }
    map
}

/// Source index for each output element of `pixel_unshuffle(_, r)`.
pub(crate) fn unshuffle_map(s: Shape, r: usize) -> Vec<usize> {
    let (oc, oh, ow) = (s.c * r * r, s.h / r, s.w / r);
    let mut map = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..oc {
            let (src_c, rem) = (c / (r * r), c % (r * r));
            let (i, j) = (rem / r, rem % r);
            for h in 0..oh {
                for w in 0..ow {
                    map.push(s.index(n, src_c, h * r + i, w * r + j));
                }
            }
        }
    }
    map
}

pub(crate) fn nearest_map(s: Shape, oh: usize, ow: usize) -> Vec<usize> {
    let mut map = Vec::with_capacity(s.n * s.c * oh * ow);
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..oh {
                let sy = i * s.h / oh;
                for j in 0..ow {
                    let sx = j * s.w / ow;
                    map.push(s.index(n, c, sy, sx));
                }
            }
        }
    }
    map
}

pub(crate) fn gather<T: Scalar>(x: &[T], map: &[usize]) -> Vec<T> {
    map.iter().map(|&i| x[i]).collect()
}

pub(crate) fn scatter_add<T: Scalar>(g: &[T], map: &[usize], dst: &mut [T]) {
    for (&i, &v) in map.iter().zip(g) {
        dst[i] = dst[i] + v;
    }
}
