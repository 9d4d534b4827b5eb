//! Image and parsing-map I/O, the bicubic degradation, synthetic faces, and
//! seeded batching.
//!
//! Directory datasets pair `hr/<stem>.png` (8-bit RGB) with
//! `parsing/<stem>.png` (8-bit labels). Every low-resolution input is derived
//! from its high-resolution image with [`bicubic_downsample`].

mod degrade;
mod io;
mod synth;

pub use degrade::bicubic_downsample;
pub use io::{load_image, load_parsing, quantize, save_image, LabelMap};
pub use synth::{synth_face, SynthFace, SYNTH_CLASSES};

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One training triple, each a batch of one: `lr (1,3,H/s,W/s)`,
/// `hr (1,3,H,W)`, `parsing (1,n_classes,H,W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub stem: String,
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
    pub parsing: Tensor<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn new(stem: impl Into<String>, hr: Tensor<T>, parsing: Tensor<T>, scale: usize) -> Result<Self> {
        let stem = stem.into();
        let (hs, ps) = (hr.shape(), parsing.shape());
        if hs.n != 1 || hs.c != 3 {
            return Err(Error::Dataset(format!("`{stem}`: image must be (1,3,H,W), got {hs}")));
        }
        if (ps.n, ps.h, ps.w) != (1, hs.h, hs.w) {
            return Err(Error::Dataset(format!("`{stem}`: parsing map {ps} does not match image {hs}")));
        }
        let lr = bicubic_downsample(&hr, scale).map_err(|e| Error::Dataset(format!("`{stem}`: {e}")))?;
        Ok(Sample { stem, lr, hr, parsing })
    }
}

/// Stacked samples along the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
    pub parsing: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    samples: Vec<Sample<T>>,
    n_classes: usize,
    scale: usize,
}

/// Seed of synthetic sample `index` in a corpus generated from `seed`.
pub fn synth_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

pub fn synth_stem(index: usize) -> String {
    format!("face_{index:05}")
}

/// Writes `count` synthetic pairs as `hr/<stem>.png` and `parsing/<stem>.png`
/// under `dir`. Returns the stems.
pub fn write_synthetic(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<String>> {
    let (hr_dir, p_dir) = (dir.join("hr"), dir.join("parsing"));
    for d in [&hr_dir, &p_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    (0..count)
        .map(|i| {
            let stem = synth_stem(i);
            let face = SynthFace::render(synth_seed(seed, i), size)?;
            save_image(&face.image::<f32>(), hr_dir.join(format!("{stem}.png")))?;
            face.labels.save(p_dir.join(format!("{stem}.png")))?;
            Ok(stem)
        })
        .collect()
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(stem.to_string());
            }
        }
    }
    Ok(stems)
}

impl<T: Scalar> Dataset<T> {
    pub fn from_samples(samples: Vec<Sample<T>>, n_classes: usize, scale: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dataset("no samples".into()));
        }
        Ok(Dataset { samples, n_classes, scale })
    }

    /// `count` rendered faces of `size × size`; sample `i` uses [`synth_seed`]`(seed, i)`.
    pub fn synthetic(count: usize, size: usize, seed: u64, n_classes: usize, scale: usize) -> Result<Self> {
        let samples = (0..count)
            .map(|i| {
                let (hr, parsing) = synth_face(synth_seed(seed, i), size, n_classes)?;
                Sample::new(synth_stem(i), hr, parsing, scale)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(samples, n_classes, scale)
    }

    /// Loads every `hr/<stem>.png` with its `parsing/<stem>.png`, sorted by stem.
    pub fn from_dir(dir: impl AsRef<Path>, n_classes: usize, scale: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let (hr_dir, p_dir) = (dir.join("hr"), dir.join("parsing"));
        let hr = png_stems(&hr_dir)?;
        let parsing = png_stems(&p_dir)?;
        if let Some(stem) = hr.difference(&parsing).next() {
            return Err(Error::MissingPair {
                stem: stem.clone(),
                kind: "parsing",
            });
        }
        if let Some(stem) = parsing.difference(&hr).next() {
            return Err(Error::MissingPair {
                stem: stem.clone(),
                kind: "hr",
            });
        }
        let samples = hr
            .iter()
            .map(|stem| {
                let img = load_image(hr_dir.join(format!("{stem}.png")))?;
                let p = load_parsing(p_dir.join(format!("{stem}.png")), n_classes)?;
                Sample::new(stem.clone(), img, p, scale)
            })
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::Dataset(format!("no images in {}", hr_dir.display())));
        }
        Self::from_samples(samples, n_classes, scale)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn get(&self, i: usize) -> &Sample<T> {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[Sample<T>] {
        &self.samples
    }

    /// Permutation of sample indices for one epoch; fixed by `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    /// The epoch's order split into consecutive batches (the last may be short).
    pub fn batches(&self, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let batch = batch.max(1);
        self.epoch_order(seed, epoch).chunks(batch).map(<[usize]>::to_vec).collect()
    }

    /// Indices used at training `step`: epochs are laid end to end.
    pub fn batch_for_step(&self, step: u64, batch: usize, seed: u64) -> Vec<usize> {
        let per_epoch = self.len().div_ceil(batch.max(1)) as u64;
        let mut bs = self.batches(batch, seed, step / per_epoch);
        bs.swap_remove((step % per_epoch) as usize)
    }

    pub fn collate(&self, indices: &[usize]) -> Result<Batch<T>> {
        let pick = |f: fn(&Sample<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
            let items: Vec<Tensor<T>> = indices.iter().map(|&i| f(&self.samples[i]).clone()).collect();
            Tensor::stack(&items).map_err(|e| Error::Dataset(format!("cannot batch samples of different sizes: {e}")))
        };
        Ok(Batch {
            indices: indices.to_vec(),
            lr: pick(|s| &s.lr)?,
            hr: pick(|s| &s.hr)?,
            parsing: pick(|s| &s.parsing)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_of_ten_by_four() {
        let d = Dataset::<f32>::synthetic(10, 32, 1, 4, 4).unwrap();
        let sizes: Vec<usize> = d.batches(4, 9, 0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = d.batches(4, 9, 0).concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn order_reproducible_per_seed_and_epoch() {
        let d = Dataset::<f32>::synthetic(10, 32, 1, 4, 4).unwrap();
        assert_eq!(d.epoch_order(5, 0), d.epoch_order(5, 0));
        assert_ne!(d.epoch_order(5, 0), d.epoch_order(5, 1));
        assert_ne!(d.epoch_order(5, 0), d.epoch_order(6, 0));
        // steps walk through epochs in order
        let steps: Vec<Vec<usize>> = (0..6).map(|s| d.batch_for_step(s, 4, 5)).collect();
        assert_eq!(steps[..3].concat(), d.epoch_order(5, 0));
        assert_eq!(steps[3..].concat(), d.epoch_order(5, 1));
    }

    #[test]
    fn lr_matches_independent_degradation() {
        let d = Dataset::<f64>::synthetic(3, 64, 2, 4, 8).unwrap();
        for s in d.samples() {
            assert_eq!(s.lr.shape(), (1, 3, 8, 8).into());
            assert_eq!(s.lr, bicubic_downsample(&s.hr, 8).unwrap());
        }
    }

    #[test]
    fn directory_round_trip_and_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let stems = write_synthetic(dir.path(), 5, 32, 11).unwrap();
        assert_eq!(stems.len(), 5);
        let from_disk = Dataset::<f32>::from_dir(dir.path(), 4, 4).unwrap();
        let in_memory = Dataset::<f32>::synthetic(5, 32, 11, 4, 4).unwrap();
        assert_eq!(from_disk.samples(), in_memory.samples());

        // rewriting with the same seed gives identical bytes
        let first = fs::read(dir.path().join("hr/face_00003.png")).unwrap();
        write_synthetic(dir.path(), 5, 32, 11).unwrap();
        assert_eq!(first, fs::read(dir.path().join("hr/face_00003.png")).unwrap());

        fs::remove_file(dir.path().join("parsing/face_00002.png")).unwrap();
        let err = Dataset::<f32>::from_dir(dir.path(), 4, 4).unwrap_err();
        assert!(matches!(err, Error::MissingPair { ref stem, kind: "parsing" } if stem == "face_00002"), "{err}");
        assert!(err.to_string().contains("face_00002"));
    }

    #[test]
    fn labels_beyond_class_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_synthetic(dir.path(), 1, 32, 0).unwrap();
        assert!(matches!(Dataset::<f32>::from_dir(dir.path(), 3, 4), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn mixed_sizes_fail_to_batch() {
        let a = Dataset::<f32>::synthetic(1, 32, 0, 4, 4).unwrap();
        let b = Dataset::<f32>::synthetic(1, 64, 0, 4, 4).unwrap();
        let d = Dataset::from_samples(vec![a.get(0).clone(), b.get(0).clone()], 4, 4).unwrap();
        assert!(d.collate(&[0, 1]).is_err());
        assert_eq!(d.collate(&[1]).unwrap().hr.shape(), (1, 3, 64, 64).into());
    }
}
