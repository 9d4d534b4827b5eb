use std::path::Path;

use image::{ColorType, GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

fn image_err(path: &Path, msg: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| image_err(path, e))
}

/// Loads an 8-bit RGB image as a `(1, 3, H, W)` tensor with values `byte / 255`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let img = decode(path)?;
    if img.color() != ColorType::Rgb8 {
        return Err(image_err(path, format!("expected 8-bit RGB, found {:?}", img.color())));
    }
    let rgb = img.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    let scale = T::of(255.0);
    Ok(Tensor::from_fn((1, 3, h, w), |_, c, y, x| T::of(raw[(y * w + x) * 3 + c] as f64) / scale))
}

/// Quantizes one value: clamp to [0, 1], then `round(v·255)`.
pub fn quantize<T: Scalar>(v: T) -> u8 {
    let v = v.f64();
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

/// Writes a `(1, 3, H, W)` tensor as an 8-bit RGB PNG.
pub fn save_image<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(Error::shape("save_image", "shape", "(1,3,H,W)", s));
    }
    let mut buf = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                buf.push(quantize(t.at(0, c, y, x)));
            }
        }
    }
    let img = RgbImage::from_raw(s.w as u32, s.h as u32, buf).expect("buffer sized from shape");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Per-pixel class indices of a parsing map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::invalid("label_map", format!("{} labels for {width}×{height}", labels.len())));
        }
        Ok(LabelMap { width, height, labels })
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Reads an 8-bit single-channel label image.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = decode(path)?;
        if img.color() != ColorType::L8 {
            return Err(image_err(
                path,
                format!("expected 8-bit single-channel labels, found {:?}", img.color()),
            ));
        }
        let g = img.into_luma8();
        let (w, h) = (g.width() as usize, g.height() as usize);
        LabelMap::new(w, h, g.into_raw())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("labels sized from dimensions");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_err(path, e))
    }

    /// `(1, n_classes, H, W)` one-hot planes. `path` only labels errors.
    pub fn one_hot<T: Scalar>(&self, n_classes: usize, path: &Path) -> Result<Tensor<T>> {
        if let Some(i) = self.labels.iter().position(|&l| l as usize >= n_classes) {
            return Err(Error::LabelOutOfRange {
                path: path.to_path_buf(),
                x: i % self.width,
                y: i / self.width,
                label: self.labels[i],
                n_classes,
            });
        }
        let shape = Shape::new(1, n_classes, self.height, self.width);
        let mut data = vec![T::zero(); shape.numel()];
        let plane = self.width * self.height;
        for (i, &l) in self.labels.iter().enumerate() {
            data[l as usize * plane + i] = T::one();
        }
        Tensor::from_vec(shape, data)
    }

    /// Inverse of [`one_hot`](Self::one_hot): first maximal plane per pixel.
    pub fn argmax<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 {
            return Err(Error::shape("label_map", "batch", 1, s.n));
        }
        let mut labels = vec![0u8; s.plane()];
        for (i, l) in labels.iter_mut().enumerate() {
            let (y, x) = (i / s.w, i % s.w);
            let mut best = t.at(0, 0, y, x);
            for c in 1..s.c {
                if t.at(0, c, y, x) > best {
                    best = t.at(0, c, y, x);
                    *l = c as u8;
                }
            }
        }
        LabelMap::new(s.w, s.h, labels)
    }
}

/// Loads a label image as one-hot `(1, n_classes, H, W)` planes.
pub fn load_parsing<T: Scalar>(path: impl AsRef<Path>, n_classes: usize) -> Result<Tensor<T>> {
    let path = path.as_ref();
    LabelMap::load(path)?.one_hot(n_classes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_rgb(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
        RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y))).save(path).unwrap();
    }

    #[test]
    fn bytes_map_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_rgb(&p, 2, 1, |x, _| if x == 0 { [255, 128, 0] } else { [1, 2, 3] });
        let t: Tensor<f64> = load_image(&p).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(t.at(0, 0, 0, 0), 1.0);
        assert_eq!(t.at(0, 1, 0, 0), 128.0 / 255.0);
        assert_eq!(t.at(0, 2, 0, 0), 0.0);
        assert_eq!(t.at(0, 2, 0, 1), 3.0 / 255.0);
    }

    #[test]
    fn save_load_save_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_rgb(&p, 13, 7, |x, y| [(x * 19 + y) as u8, (y * 37) as u8, (x * y * 3) as u8]);
        let orig = std::fs::read(&p).unwrap();
        let t: Tensor<f32> = load_image(&p).unwrap();
        let q = dir.path().join("b.png");
        save_image(&t, &q).unwrap();
        let back: Tensor<f32> = load_image(&q).unwrap();
        assert_eq!(back, t);
        let r = dir.path().join("c.png");
        save_image(&back, &r).unwrap();
        assert_eq!(std::fs::read(&q).unwrap(), std::fs::read(&r).unwrap());
        // pixel bytes survive even if the encoder's container bytes differ
        let a = image::open(&p).unwrap().into_rgb8();
        let b = image::open(&q).unwrap().into_rgb8();
        assert_eq!(a.as_raw(), b.as_raw());
        assert!(!orig.is_empty());
    }

    #[test]
    fn save_clamps_and_rounds() {
        assert_eq!(quantize(-0.2f64), 0);
        assert_eq!(quantize(1.7f64), 255);
        assert_eq!(quantize(0.5f64), 128);
        assert_eq!(quantize(127.4f64 / 255.0), 127);
        assert_eq!(quantize(f64::NAN), 0);
    }

    #[test]
    fn wrong_kind_of_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.png");
        GrayImage::from_raw(2, 2, vec![0, 1, 2, 3]).unwrap().save(&p).unwrap();
        let err = load_image::<f32>(&p).unwrap_err().to_string();
        assert!(err.contains("labels.png") && err.contains("RGB"), "{err}");
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not an image").unwrap();
        assert!(load_image::<f32>(&junk).unwrap_err().to_string().contains("junk.png"));
        let missing = dir.path().join("missing.png");
        assert!(matches!(load_image::<f32>(&missing), Err(Error::Io { .. })));
        let rgb = dir.path().join("rgb.png");
        write_rgb(&rgb, 2, 2, |_, _| [0, 0, 0]);
        assert!(LabelMap::load(&rgb).is_err());
    }

    #[test]
    fn one_hot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        let labels: Vec<u8> = (0..35).map(|i| (i * 7 % 19) as u8).collect();
        let map = LabelMap::new(7, 5, labels).unwrap();
        map.save(&p).unwrap();
        let t: Tensor<f32> = load_parsing(&p, 19).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                let s: f32 = (0..19).map(|c| t.at(0, c, y, x)).sum();
                assert_eq!(s, 1.0);
            }
        }
        assert_eq!(LabelMap::argmax(&t).unwrap(), map);
    }

    #[test]
    fn background_only_map() {
        let map = LabelMap::new(3, 2, vec![0; 6]).unwrap();
        let t: Tensor<f64> = map.one_hot(4, Path::new("bg.png")).unwrap();
        assert!((0..6).all(|i| t.data()[i] == 1.0));
        assert!(t.data()[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_label_reports_location() {
        let mut labels = vec![0u8; 12];
        labels[2 * 4 + 3] = 9;
        let map = LabelMap::new(4, 3, labels).unwrap();
        let err = map.one_hot::<f32>(4, Path::new("face.png")).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { x: 3, y: 2, label: 9, n_classes: 4, .. }));
        let msg = err.to_string();
        assert!(msg.contains("face.png") && msg.contains("x=3") && msg.contains("y=2"), "{msg}");
    }
}
