//! Procedural face-like images with exact parsing maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::LabelMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const SKIN: u8 = 1;
pub const EYE: u8 = 2;
pub const MOUTH: u8 = 3;

/// Classes drawn by the generator.
pub const SYNTH_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    /// Normalized squared radius of a pixel center.
    fn d2(&self, x: f64, y: f64) -> f64 {
        let (u, v) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        u * u + v * v
    }
}

/// A rendered face: 8-bit RGB pixels (row-major, interleaved) and labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthFace {
    pub size: usize,
    pub rgb: Vec<u8>,
    pub labels: LabelMap,
}

impl SynthFace {
    /// Renders a `size × size` face; identical seeds give identical bytes.
    ///
    /// Every ellipse radius is at least one pixel, so each one contains a
    /// pixel center and all four classes appear in the label map.
    pub fn render(seed: u64, size: usize) -> Result<Self> {
        if size < 32 {
            return Err(Error::invalid("synth_face", format!("size must be at least 32, got {size}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = size as f64;
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);

        let bg0 = [u(0.1, 0.9), u(0.1, 0.9), u(0.1, 0.9)];
        let bg1 = [u(0.1, 0.9), u(0.1, 0.9), u(0.1, 0.9)];
        let angle = u(0.0, std::f64::consts::TAU);
        let face = Ellipse {
            cx: s * (0.5 + u(-0.05, 0.05)),
            cy: s * (0.5 + u(-0.04, 0.04)),
            rx: s * u(0.28, 0.34),
            ry: s * u(0.36, 0.42),
        };
        let skin = [u(0.6, 0.95), u(0.4, 0.75), u(0.3, 0.6)];
        let light = (u(-0.6, 0.6), u(-0.6, 0.6));
        let eye_y = face.cy - face.ry * u(0.18, 0.28);
        let eye_dx = face.rx * u(0.35, 0.45);
        let erx = (face.rx * u(0.15, 0.2)).max(1.0);
        let ery = (erx * u(0.5, 0.7)).max(1.0);
        let eyes = [-1.0, 1.0].map(|side| Ellipse {
            cx: face.cx + side * eye_dx,
            cy: eye_y,
            rx: erx,
            ry: ery,
        });
        let iris = [u(0.05, 0.3), u(0.05, 0.3), u(0.05, 0.35)];
        let mouth = Ellipse {
            cx: face.cx + face.rx * u(-0.05, 0.05),
            cy: face.cy + face.ry * u(0.45, 0.55),
            rx: (face.rx * u(0.3, 0.42)).max(1.0),
            ry: (face.ry * u(0.07, 0.11)).max(1.0),
        };
        let lips = [u(0.5, 0.8), u(0.1, 0.3), u(0.15, 0.35)];

        let mut rgb = Vec::with_capacity(size * size * 3);
        let mut labels = Vec::with_capacity(size * size);
        let (ca, sa) = (angle.cos(), angle.sin());
        for py in 0..size {
            for px in 0..size {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let t = (((x / s - 0.5) * ca + (y / s - 0.5) * sa) + 0.5).clamp(0.0, 1.0);
                let mut color = [0.0; 3];
                for c in 0..3 {
                    color[c] = bg0[c] * (1.0 - t) + bg1[c] * t;
                }
                let mut label = BACKGROUND;
                let fd = face.d2(x, y);
                if fd <= 1.0 {
                    label = SKIN;
                    let (fu, fv) = ((x - face.cx) / face.rx, (y - face.cy) / face.ry);
                    let z = (1.0 - fd).max(0.0).sqrt();
                    let shade = 0.55 + 0.35 * z + 0.15 * (fu * light.0 + fv * light.1);
                    for c in 0..3 {
                        color[c] = skin[c] * shade;
                    }
                }
                for e in &eyes {
                    let d = e.d2(x, y);
                    if d <= 1.0 {
                        label = EYE;
                        for c in 0..3 {
                            color[c] = iris[c] * (0.6 + 0.4 * d);
                        }
                    }
                }
                let md = mouth.d2(x, y);
                if md <= 1.0 {
                    label = MOUTH;
                    for c in 0..3 {
                        color[c] = lips[c] * (0.75 + 0.25 * md);
                    }
                }
                for v in color {
                    rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
                labels.push(label);
            }
        }
        Ok(SynthFace {
            size,
            rgb,
            labels: LabelMap::new(size, size, labels)?,
        })
    }

    /// `(1, 3, size, size)` image with values `byte / 255`.
    pub fn image<T: Scalar>(&self) -> Tensor<T> {
        let n = self.size;
        let scale = T::of(255.0);
        Tensor::from_fn((1, 3, n, n), |_, c, y, x| T::of(self.rgb[(y * n + x) * 3 + c] as f64) / scale)
    }
}

/// Renders a face and returns `(hr, parsing)` with `n_classes ≥ 4` one-hot planes.
pub fn synth_face<T: Scalar>(seed: u64, size: usize, n_classes: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let face = SynthFace::render(seed, size)?;
    let parsing = face.labels.one_hot(n_classes, std::path::Path::new("<synthetic>"))?;
    Ok((face.image(), parsing))
}
