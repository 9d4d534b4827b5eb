//! PSNR and SSIM on 8-bit-scaled values, and model evaluation reports.
//!
//! Inputs are tensors in `[0, 1]`; every metric works on `v·255` in 64-bit.

mod report;

pub use report::{evaluate, Bicubic, Identity, ImageMetrics, MeanMetrics, MetricReport, SuperResolver};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const PEAK: f64 = 255.0;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// BT.601 luma of an `(n, 3, H, W)` image, as `(n, 1, H, W)` in `[16/255, 235/255]`.
pub fn rgb_to_y<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<f64>> {
    let s = img.shape();
    if s.c != 3 {
        return Err(Error::shape("rgb_to_y", "channels", 3, s.c));
    }
    Ok(Tensor::from_fn((s.n, 1, s.h, s.w), |n, _, y, x| {
        let (r, g, b) = (img.at(n, 0, y, x).f64(), img.at(n, 1, y, x).f64(), img.at(n, 2, y, x).f64());
        (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
    }))
}

/// `10·log10(255² / MSE)` over every element; `+∞` when the inputs are equal.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", "shape", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Err(Error::invalid("psnr", "empty image"));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x.f64() - y.f64()) * PEAK;
            d * d
        })
        .sum();
    let mse = sse / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    })
}

/// Normalized 1-D Gaussian; the SSIM window is its outer product with itself.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = g.iter().sum();
    g.map(|v| v / total)
}

/// Valid-region separable filtering of an `h × w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(k, &gk)| gk * p[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(k, &gk)| gk * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> f64 {
    let (c1, c2) = ((K1 * PEAK).powi(2), (K2 * PEAK).powi(2));
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, g);
    let mu_b = filter_valid(b, h, w, g);
    let e_aa = filter_valid(&prod(a, a), h, w, g);
    let e_bb = filter_valid(&prod(b, b), h, w, g);
    let e_ab = filter_valid(&prod(a, b), h, w, g);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let (maa, mbb, mab) = (ma * ma, mb * mb, ma * mb);
        let (va, vb, cov) = (e_aa[i] - maa, e_bb[i] - mbb, e_ab[i] - mab);
        let num = (2.0 * mab + c1) * (2.0 * cov + c2);
        let den = (maa + mbb + c1) * (va + vb + c2);
        sum += num / den;
    }
    sum / mu_a.len() as f64
}

/// Mean SSIM over every `(image, channel)` plane: 11×11 Gaussian window
/// (σ = 1.5), K1 = 0.01, K2 = 0.03, L = 255, valid window positions only.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let s = a.shape();
    if s != b.shape() {
        return Err(Error::shape("ssim", "shape", s, b.shape()));
    }
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            "image size",
            format!("at least {SSIM_WINDOW}×{SSIM_WINDOW}"),
            format!("{}×{}", s.h, s.w),
        ));
    }
    let g = gaussian_window();
    let plane = s.h * s.w;
    let scaled = |t: &Tensor<T>| t.data().iter().map(|v| v.f64() * PEAK).collect::<Vec<_>>();
    let (a, b) = (scaled(a), scaled(b));
    let planes = s.n * s.c;
    let total: f64 = (0..planes)
        .map(|i| ssim_plane(&a[i * plane..(i + 1) * plane], &b[i * plane..(i + 1) * plane], s.h, s.w, &g))
        .sum();
    Ok(total / planes as f64)
}
