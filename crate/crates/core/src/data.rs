//! Datasets: IDX (MNIST-style) files, CIFAR-10 binary batches and a
//! procedural grating dataset for fully offline runs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images in `[0, 1]` with `[N, C, H, W]` layout and integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Input(format!("images must be [N, C, H, W], got {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {l} outside 0..{num_classes}")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            split,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gather a minibatch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.select(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// Contiguous index range as its own dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        if start >= end || end > self.len() {
            return Err(Error::Usage(format!("slice {start}..{end} of {} samples", self.len())));
        }
        let idx: Vec<usize> = (start..end).collect();
        let (images, labels) = self.batch(&idx)?;
        Ok(Dataset {
            images,
            labels,
            split: self.split,
            num_classes: self.num_classes,
        })
    }

    /// Shuffled minibatch index lists; the last batch may be short.
    pub fn shuffled_batches<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// In-order minibatch index lists.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// `count` distinct random indices.
    pub fn sample_indices<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<usize>> {
        if count == 0 || count > self.len() {
            return Err(Error::Usage(format!(
                "cannot draw {count} samples from a dataset of {}",
                self.len()
            )));
        }
        Ok(rand::seq::index::sample(rng, self.len(), count).into_vec())
    }

    /// Number of samples of each class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: header truncated")))
}

/// Parse IDX image and label byte buffers.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8], split: Split) -> Result<Dataset> {
    let magic = be_u32(image_bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = be_u32(image_bytes, 4, "idx images")? as usize;
    let rows = be_u32(image_bytes, 8, "idx images")? as usize;
    let cols = be_u32(image_bytes, 12, "idx images")? as usize;
    let pixels = &image_bytes[16..];
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format(format!("idx images: empty dimensions ({n}, {rows}, {cols})")));
    }
    if pixels.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "idx images: header says {n}x{rows}x{cols} = {} bytes, file has {}",
            n * rows * cols,
            pixels.len()
        )));
    }

    let magic = be_u32(label_bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "idx labels: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(label_bytes, 4, "idx labels")? as usize;
    let labels = &label_bytes[8..];
    if labels.len() != count {
        return Err(Error::Format(format!(
            "idx labels: header says {count} labels, file has {}",
            labels.len()
        )));
    }
    if count != n {
        return Err(Error::Consistency(format!("{n} images but {count} labels")));
    }

    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new([n, 1, rows, cols], data)?;
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(images, labels, split, num_classes)
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    parse_idx(&fs::read(images)?, &fs::read(labels)?, split)
}

/// Write a single-channel dataset as an IDX image/label pair.
pub fn save_idx(data: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let s = data.images.shape();
    if s[1] != 1 {
        return Err(Error::Usage("IDX images hold a single channel".into()));
    }
    let mut img = Vec::with_capacity(16 + data.images.len());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        img.extend(v.to_be_bytes());
    }
    img.extend(data.images.data().iter().map(|&v| (v * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + data.len());
    for v in [IDX_LABELS_MAGIC, data.len() as u32] {
        lab.extend(v.to_be_bytes());
    }
    lab.extend(data.labels.iter().map(|&l| l as u8));
    fs::write(images, img)?;
    fs::write(labels, lab)?;
    Ok(())
}

/// Parse concatenated CIFAR-10 records: one label byte followed by the red,
/// green and blue 32x32 planes.
pub fn parse_cifar(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "cifar: {} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] >= 10 {
            return Err(Error::Format(format!("cifar: label byte {} outside 0..10", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new([n, 3, 32, 32], data)?, labels, split, 10)
}

pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P], split: Split) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let b = fs::read(p)?;
        if b.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "cifar: {} has {} bytes, not a multiple of {CIFAR_RECORD}",
                p.as_ref().display(),
                b.len()
            )));
        }
        bytes.extend(b);
    }
    parse_cifar(&bytes, split)
}

/// Parameters of the procedural grating dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub count: usize,
    /// Image side length.
    pub size: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            count: 512,
            size: 12,
            noise: 0.1,
            seed: 0,
        }
    }
}

/// Grating orientation (radians) and spatial frequency (cycles per image) of class `c`.
pub fn grating_params(c: usize, classes: usize) -> (f32, f32) {
    let theta = std::f32::consts::PI * c as f32 / classes as f32;
    let freq = 1.5 + 0.75 * (c % 3) as f32;
    (theta, freq)
}

/// Single-channel images of high-contrast oriented stripe patterns. Sample `n` has
/// class `n mod K`; each sample gets a random phase and Gaussian noise.
pub fn synth_dataset(cfg: &SynthConfig, split: Split) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::Config("synthetic dataset needs at least 2 classes".into()));
    }
    if cfg.count == 0 || cfg.size == 0 {
        return Err(Error::Config("synthetic dataset needs count and size > 0".into()));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::Config(format!("noise must be >= 0, got {}", cfg.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0f32, cfg.noise.max(f32::MIN_POSITIVE)).expect("valid std");
    let side = cfg.size;
    let mut data = Vec::with_capacity(cfg.count * side * side);
    let mut labels = Vec::with_capacity(cfg.count);
    for n in 0..cfg.count {
        let c = n % cfg.classes;
        let (theta, freq) = grating_params(c, cfg.classes);
        let (ct, st) = (theta.cos(), theta.sin());
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        for i in 0..side {
            for j in 0..side {
                let u = (j as f32 * ct + i as f32 * st) / side as f32;
                let mut v = 0.5 + 0.45 * (4.0 * (std::f32::consts::TAU * freq * u + phase).sin()).tanh();
                if cfg.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new([cfg.count, 1, side, side], data)?, labels, split, cfg.classes)
}
