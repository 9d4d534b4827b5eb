use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Serialize, Serializer};

use super::{psnr, rgb_to_y, ssim};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::resample::bicubic_resize;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Anything that maps a sample's low-resolution input to an SR image.
pub trait SuperResolver<T: Scalar> {
    fn name(&self) -> String;
    fn super_resolve(&self, sample: &Sample<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> SuperResolver<T> for Network<T> {
    fn name(&self) -> String {
        self.kind().to_string()
    }

    fn super_resolve(&self, s: &Sample<T>) -> Result<Tensor<T>> {
        let parsing = self.requires_parsing().then_some(&s.parsing);
        Ok(self.predict(&s.lr, parsing)?.sr)
    }
}

/// Baseline: bicubic upsampling of the input to the target size.
#[derive(Clone, Copy, Debug, Default)]
pub struct Bicubic;

impl<T: Scalar> SuperResolver<T> for Bicubic {
    fn name(&self) -> String {
        "bicubic".into()
    }

    fn super_resolve(&self, s: &Sample<T>) -> Result<Tensor<T>> {
        let hs = s.hr.shape();
        Ok(bicubic_resize(&s.lr, hs.h, hs.w))
    }
}

/// Returns the ground truth; scores are the metric ceilings.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl<T: Scalar> SuperResolver<T> for Identity {
    fn name(&self) -> String {
        "identity".into()
    }

    fn super_resolve(&self, s: &Sample<T>) -> Result<Tensor<T>> {
        Ok(s.hr.clone())
    }
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub image: String,
    /// `null` in JSON when the images are identical.
    #[serde(serialize_with = "finite_or_null")]
    pub psnr_y: f64,
    pub ssim_y: f64,
    #[serde(serialize_with = "finite_or_null")]
    pub psnr_rgb: f64,
    pub ssim_rgb: f64,
}

/// Means over images. Infinite PSNRs are left out and counted instead; if
/// every image is infinite the mean is infinite too.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanMetrics {
    #[serde(serialize_with = "finite_or_null")]
    pub psnr_y: f64,
    pub ssim_y: f64,
    #[serde(serialize_with = "finite_or_null")]
    pub psnr_rgb: f64,
    pub ssim_rgb: f64,
    pub infinite_psnr_y: usize,
    pub infinite_psnr_rgb: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub model: String,
    pub images: Vec<ImageMetrics>,
    pub mean: MeanMetrics,
}

fn finite_mean(vals: impl Iterator<Item = f64>) -> (f64, usize) {
    let (mut sum, mut n, mut inf) = (0.0, 0usize, 0usize);
    for v in vals {
        if v.is_finite() {
            sum += v;
            n += 1;
        } else {
            inf += 1;
        }
    }
    (if n == 0 { f64::INFINITY } else { sum / n as f64 }, inf)
}

fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "inf".into()
    }
}

impl MetricReport {
    pub fn from_images(model: impl Into<String>, images: Vec<ImageMetrics>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
        }
        let n = images.len() as f64;
        let (psnr_y, infinite_psnr_y) = finite_mean(images.iter().map(|m| m.psnr_y));
        let (psnr_rgb, infinite_psnr_rgb) = finite_mean(images.iter().map(|m| m.psnr_rgb));
        let mean = MeanMetrics {
            psnr_y,
            ssim_y: images.iter().map(|m| m.ssim_y).sum::<f64>() / n,
            psnr_rgb,
            ssim_rgb: images.iter().map(|m| m.ssim_rgb).sum::<f64>() / n,
            infinite_psnr_y,
            infinite_psnr_rgb,
        };
        Ok(MetricReport {
            model: model.into(),
            images,
            mean,
        })
    }

    /// One row per image, then a `mean` row; `inf` marks identical images.
    /// Comment lines after the table count infinite values left out of the means.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("image\tpsnr_y\tssim_y\tpsnr_rgb\tssim_rgb\n");
        let mut row = |name: &str, p_y: f64, s_y: f64, p_rgb: f64, s_rgb: f64| {
            let _ = writeln!(
                out,
                "{name}\t{}\t{}\t{}\t{}",
                fmt_metric(p_y),
                fmt_metric(s_y),
                fmt_metric(p_rgb),
                fmt_metric(s_rgb)
            );
        };
        for m in &self.images {
            row(&m.image, m.psnr_y, m.ssim_y, m.psnr_rgb, m.ssim_rgb);
        }
        let mean = &self.mean;
        row("mean", mean.psnr_y, mean.ssim_y, mean.psnr_rgb, mean.ssim_rgb);
        for (col, k) in [("psnr_y", mean.infinite_psnr_y), ("psnr_rgb", mean.infinite_psnr_rgb)] {
            if k > 0 {
                let _ = writeln!(out, "# {col}: {k} infinite value(s) excluded from mean");
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write(&self, tsv: impl AsRef<Path>, json: impl AsRef<Path>) -> Result<()> {
        let (tsv, json) = (tsv.as_ref(), json.as_ref());
        fs::write(tsv, self.to_tsv()).map_err(|e| Error::io(tsv, e))?;
        fs::write(json, self.to_json()).map_err(|e| Error::io(json, e))
    }
}

/// Scores `model` on every sample in dataset order. Outputs are clamped to
/// `[0, 1]` before scoring, as they would be when saved as 8-bit images.
pub fn evaluate<T: Scalar, M: SuperResolver<T> + ?Sized>(model: &M, data: &Dataset<T>) -> Result<MetricReport> {
    let images = data
        .samples()
        .iter()
        .map(|s| {
            let sr = model.super_resolve(s)?;
            if sr.shape() != s.hr.shape() {
                return Err(Error::shape("evaluate", "output shape", s.hr.shape(), sr.shape()));
            }
            let sr = sr.map(|v| v.max(T::zero()).min(T::one()));
            let (y_sr, y_hr) = (rgb_to_y(&sr)?, rgb_to_y(&s.hr)?);
            Ok(ImageMetrics {
                image: s.stem.clone(),
                psnr_y: psnr(&y_sr, &y_hr)?,
                ssim_y: ssim(&y_sr, &y_hr)?,
                psnr_rgb: psnr(&sr, &s.hr)?,
                ssim_rgb: ssim(&sr, &s.hr)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_images(model.name(), images)
}
