//! Separable Catmull-Rom resampling.
//!
//! Weights follow the antialiased convention: when shrinking by `s` the
//! kernel is stretched by `s` (and renormalized), when enlarging it is used
//! as-is. Taps falling outside the image are clamped to the nearest edge.

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Catmull-Rom cubic (`a = -0.5`).
pub fn catmull_rom(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// One output sample: source indices (edge-clamped) and normalized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Taps {
    pub index: Vec<usize>,
    pub weight: Vec<f64>,
}

/// 1-D resampling operator from `in_len` to `out_len` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampler {
    pub in_len: usize,
    pub out_len: usize,
    pub taps: Vec<Taps>,
}

impl Resampler {
    pub fn cubic(in_len: usize, out_len: usize) -> Self {
        assert!(in_len > 0 && out_len > 0, "resampler lengths must be positive");
        let scale = in_len as f64 / out_len as f64;
        let stretch = scale.max(1.0);
        let support = 2.0 * stretch;
        let taps = (0..out_len)
            .map(|i| {
                let center = (i as f64 + 0.5) * scale - 0.5;
                let lo = (center - support).floor() as isize;
                let hi = (center + support).ceil() as isize;
                let mut index = Vec::new();
                let mut weight = Vec::new();
                for j in lo..=hi {
                    let w = catmull_rom((j as f64 - center) / stretch);
                    if w != 0.0 {
                        index.push(j.clamp(0, in_len as isize - 1) as usize);
                        weight.push(w);
                    }
                }
                let total: f64 = weight.iter().sum();
                weight.iter_mut().for_each(|w| *w /= total);
                Taps { index, weight }
            })
            .collect();
        Resampler { in_len, out_len, taps }
    }

    fn typed<T: Scalar>(&self) -> Vec<(Vec<usize>, Vec<T>)> {
        self.taps
            .iter()
            .map(|t| (t.index.clone(), t.weight.iter().map(|&w| T::of(w)).collect()))
            .collect()
    }
}

/// Rows then columns: `out = Ry · x · Rxᵀ` on every plane.
pub(crate) fn apply<T: Scalar>(x: &[T], s: Shape, ry: &Resampler, rx: &Resampler) -> Vec<T> {
    debug_assert_eq!((ry.in_len, rx.in_len), (s.h, s.w));
    let (oh, ow) = (ry.out_len, rx.out_len);
    let ty = ry.typed::<T>();
    let tx = rx.typed::<T>();
    let planes = s.n * s.c;
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut tmp = vec![T::zero(); s.h * ow];
    for p in 0..planes {
        let src = &x[p * s.plane()..(p + 1) * s.plane()];
        for y in 0..s.h {
            let row = &src[y * s.w..(y + 1) * s.w];
            for (j, (idx, wt)) in tx.iter().enumerate() {
                let mut acc = T::zero();
                for (&i, &w) in idx.iter().zip(wt) {
                    acc = acc + row[i] * w;
                }
                tmp[y * ow + j] = acc;
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (i, (idx, wt)) in ty.iter().enumerate() {
            for j in 0..ow {
                let mut acc = T::zero();
                for (&r, &w) in idx.iter().zip(wt) {
                    acc = acc + tmp[r * ow + j] * w;
                }
                dst[i * ow + j] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`apply`]: scatters an output-shaped gradient back to the input grid.
pub(crate) fn apply_transpose<T: Scalar>(g: &[T], s: Shape, ry: &Resampler, rx: &Resampler) -> Vec<T> {
    let (oh, ow) = (ry.out_len, rx.out_len);
    let ty = ry.typed::<T>();
    let tx = rx.typed::<T>();
    let planes = s.n * s.c;
    let mut out = vec![T::zero(); planes * s.plane()];
    let mut tmp = vec![T::zero(); s.h * ow];
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        tmp.iter_mut().for_each(|v| *v = T::zero());
        for (i, (idx, wt)) in ty.iter().enumerate() {
            for (&r, &w) in idx.iter().zip(wt) {
                for j in 0..ow {
                    tmp[r * ow + j] = tmp[r * ow + j] + gp[i * ow + j] * w;
                }
            }
        }
        let dst = &mut out[p * s.plane()..(p + 1) * s.plane()];
        for y in 0..s.h {
            for (j, (idx, wt)) in tx.iter().enumerate() {
                let gv = tmp[y * ow + j];
                for (&c, &w) in idx.iter().zip(wt) {
                    dst[y * s.w + c] = dst[y * s.w + c] + gv * w;
                }
            }
        }
    }
    out
}

/// Bicubic resize of every plane to `out_h × out_w` (no clamping of values).
pub fn bicubic_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape();
    let ry = Resampler::cubic(s.h, out_h);
    let rx = Resampler::cubic(s.w, out_w);
    let data = apply(x.data(), s, &ry, &rx);
    Tensor::from_vec(Shape::new(s.n, s.c, out_h, out_w), data).expect("resample output length")
}
