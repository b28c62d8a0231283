//! In-memory labelled image sets: CIFAR-10 binary batches and a seeded
//! synthetic grating set.

use std::f32::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Bytes per CIFAR-10 record: one label byte, then 3x32x32 pixels stored
/// channel-major (R, G, B), row-major within a channel.
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    classes: usize,
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: [usize; 3], classes: usize, images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(shape_err!(
                "{} pixel values for {} images of shape {shape:?}",
                images.len(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            shape,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(self.shape.to_vec(), self.pixels(i).to_vec()).expect("validated shape")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            shape: self.shape,
            classes: self.classes,
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Split into the first `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let cut = n * self.image_len();
        (
            Dataset {
                shape: self.shape,
                classes: self.classes,
                images: self.images[..cut].to_vec(),
                labels: self.labels[..n].to_vec(),
            },
            Dataset {
                shape: self.shape,
                classes: self.classes,
                images: self.images[cut..].to_vec(),
                labels: self.labels[n..].to_vec(),
            },
        )
    }

    pub fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
        let mut iter = parts.into_iter();
        let mut out = iter.next().ok_or_else(|| config_err!("no datasets to concatenate"))?;
        for d in iter {
            if d.shape != out.shape || d.classes != out.classes {
                return Err(shape_err!("cannot concatenate {:?} with {:?}", d.shape, out.shape));
            }
            out.images.extend(d.images);
            out.labels.extend(d.labels);
        }
        Ok(out)
    }

    /// Per-channel pixel mean, accumulated in `f64`.
    pub fn channel_means(&self) -> Vec<f32> {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut sums = vec![0.0f64; c];
        for img in self.images.chunks(self.image_len()) {
            for (ci, s) in sums.iter_mut().enumerate() {
                *s += img[ci * plane..(ci + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        sums.into_iter().map(|s| (s / count) as f32).collect()
    }

    pub fn subtract_channel_means(&mut self, means: &[f32]) -> Result<()> {
        let [c, h, w] = self.shape;
        if means.len() != c {
            return Err(shape_err!("{} channel means for {c} channels", means.len()));
        }
        let plane = h * w;
        let n = self.image_len();
        for img in self.images.chunks_mut(n) {
            for (ci, &m) in means.iter().enumerate() {
                img[ci * plane..(ci + 1) * plane].iter_mut().for_each(|v| *v -= m);
            }
        }
        Ok(())
    }
}

/// Parse concatenated CIFAR-10 records. Pixels are scaled to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] as usize >= CIFAR_CLASSES {
            return Err(Error::Data(format!("record {i}: label byte {} is not in 0..10", rec[0])));
        }
        labels.push(rec[0]);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(CIFAR_SHAPE, CIFAR_CLASSES, images, labels)
}

pub fn load_cifar10_file(path: &Path) -> Result<Dataset> {
    parse_cifar10(&std::fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarSplit {
    Train,
    Test,
}

/// Load the standard batch files (`data_batch_1.bin` .. `data_batch_5.bin`
/// or `test_batch.bin`) from `dir`. Missing training batches after the
/// first are skipped.
pub fn load_cifar10(dir: &Path, split: CifarSplit) -> Result<Dataset> {
    match split {
        CifarSplit::Test => load_cifar10_file(&dir.join("test_batch.bin")),
        CifarSplit::Train => {
            let mut parts = vec![load_cifar10_file(&dir.join("data_batch_1.bin"))?];
            for i in 2..=5 {
                let p = dir.join(format!("data_batch_{i}.bin"));
                if p.exists() {
                    parts.push(load_cifar10_file(&p)?);
                }
            }
            Dataset::concat(parts)
        }
    }
}

pub const SYNTHETIC_SHAPE: [usize; 3] = [3, 32, 32];

/// Seeded oriented-grating images.
///
/// Class `k` is a sinusoidal grating at orientation `k * 180 / classes`
/// degrees with one of two spatial frequencies, drawn with random phase,
/// contrast, per-channel tint and pixel noise. Labels cycle through the
/// classes in order, so `n == classes` yields one image per class.
pub fn gen_synthetic(seed: u64, n: usize, classes: usize) -> Result<Dataset> {
    gen_synthetic_with_noise(seed, n, classes, SYNTHETIC_NOISE)
}

/// Pixel noise standard deviation of [`gen_synthetic`].
pub const SYNTHETIC_NOISE: f32 = 0.6;

/// [`gen_synthetic`] with a chosen pixel noise level.
pub fn gen_synthetic_with_noise(seed: u64, n: usize, classes: usize, noise_sigma: f32) -> Result<Dataset> {
    if classes == 0 || classes > u8::MAX as usize {
        return Err(config_err!("class count must be in 1..=255, got {classes}"));
    }
    if n < classes {
        return Err(config_err!("need at least one sample per class ({n} < {classes})"));
    }
    let [c, h, w] = SYNTHETIC_SHAPE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, noise_sigma).map_err(|e| config_err!("noise level {noise_sigma}: {e}"))?;
    let mut images = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let theta = PI * k as f32 / classes as f32 + rng.random_range(-0.04..0.04);
        let cycles = if k.is_multiple_of(2) { 3.0 } else { 4.5 };
        let freq = 2.0 * PI * cycles / w as f32;
        let phase = rng.random_range(0.0..2.0 * PI);
        let contrast = rng.random_range(0.2..0.35);
        let (dx, dy) = (theta.cos(), theta.sin());
        for _ in 0..c {
            let tint = rng.random_range(0.7..1.0);
            for y in 0..h {
                for x in 0..w {
                    let s = (freq * (x as f32 * dx + y as f32 * dy) + phase).sin();
                    images.push(0.5 + contrast * tint * s + noise.sample(&mut rng));
                }
            }
        }
        labels.push(k as u8);
    }
    Dataset::new(SYNTHETIC_SHAPE, classes, images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn cifar_record_arithmetic() {
        let mut bytes = record(3, |i| (i % 256) as u8);
        bytes.extend(record(9, |_| 255));
        let d = parse_cifar10(&bytes).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.shape(), [3, 32, 32]);
        assert_eq!((d.label(0), d.label(1)), (3, 9));
        // pixel 1024 is the first green value
        assert_eq!(d.image(0).at(1, 0, 0), (1024 % 256) as f32 / 255.0);
        assert_eq!(d.image(0).at(0, 1, 2), 34.0 / 255.0);
        assert!(d.pixels(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cifar_rejects_bad_input() {
        assert!(parse_cifar10(&[0u8; 3072]).is_err());
        assert!(parse_cifar10(&record(10, |_| 0)).is_err());
        assert!(parse_cifar10(&[]).unwrap().is_empty());
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = gen_synthetic(4, 30, 10).unwrap();
        assert_eq!(a, gen_synthetic(4, 30, 10).unwrap());
        assert_ne!(a, gen_synthetic(5, 30, 10).unwrap());
        let one_each = gen_synthetic(1, 10, 10).unwrap();
        let mut labels = one_each.labels().to_vec();
        labels.sort();
        assert_eq!(labels, (0..10).collect::<Vec<u8>>());
        assert!(gen_synthetic(1, 9, 10).is_err());
    }

    #[test]
    fn channel_means_and_subtraction() {
        let mut d = gen_synthetic(2, 20, 4).unwrap();
        let m = d.channel_means();
        assert_eq!(m.len(), 3);
        d.subtract_channel_means(&m).unwrap();
        assert!(d.channel_means().iter().all(|v| v.abs() < 1e-4));
        assert!(d.subtract_channel_means(&[0.0]).is_err());
    }

    #[test]
    fn split_and_take() {
        let d = gen_synthetic(3, 12, 3).unwrap();
        let (a, b) = d.split_at(5);
        assert_eq!((a.len(), b.len()), (5, 7));
        assert_eq!(Dataset::concat(vec![a.clone(), b]).unwrap(), d);
        assert_eq!(d.take(5), a);
        assert_eq!(d.take(100).len(), 12);
    }
}
