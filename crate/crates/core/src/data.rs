//! Dataset loading (IDX, CIFAR-10 binary, synthetic) and augmentation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::stream_rng;
use crate::tensor::Tensor;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel constants subtracted and divided out at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Channel mean and population std of `(N, C, H, W)` images.
    pub fn fit(images: &Tensor) -> Result<Self> {
        let s = images.dims4()?;
        let plane = s.plane();
        let count = (s.n * plane) as f64;
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for (c, m) in mean.iter_mut().enumerate() {
            *m = (0..s.n)
                .map(|n| images.data()[(n * s.c + c) * plane..][..plane].iter().sum::<f64>())
                .sum::<f64>()
                / count;
        }
        for (c, v) in var.iter_mut().enumerate() {
            *v = (0..s.n)
                .map(|n| {
                    images.data()[(n * s.c + c) * plane..][..plane]
                        .iter()
                        .map(|x| (x - mean[c]).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / count;
        }
        let std = var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Standardization { mean, std })
    }

    pub fn apply(&self, images: &mut Tensor) -> Result<()> {
        let s = images.dims4()?;
        if s.c != self.mean.len() {
            return Err(Error::Shape(format!(
                "standardization has {} channels, images have {}",
                self.mean.len(),
                s.c
            )));
        }
        let plane = s.plane();
        for (i, chunk) in images.data_mut().chunks_mut(plane).enumerate() {
            let c = i % s.c;
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Ok(())
    }
}

/// Images with labels. Pixel values are already standardized with `norm`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub norm: Standardization,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split, norm: Standardization, classes: usize) -> Result<Self> {
        let s = images.dims4()?;
        if s.n != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", s.n, labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Format(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            split,
            norm,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` samples, in file order.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        self.select(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Dataset {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
            norm: self.norm.clone(),
            classes: self.classes,
        })
    }

    /// Images and labels of `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.images.select_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }
}

/// Train and test splits sharing one standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Standardizes both splits with constants fitted on `train`.
    pub fn from_raw(train: (Tensor, Vec<usize>), test: (Tensor, Vec<usize>), classes: usize) -> Result<Self> {
        let (mut train_x, train_y) = train;
        let (mut test_x, test_y) = test;
        if train_y.is_empty() {
            return Err(Error::EmptySplit("training split has no samples".into()));
        }
        if test_y.is_empty() {
            return Err(Error::EmptySplit("test split has no samples".into()));
        }
        let norm = Standardization::fit(&train_x)?;
        norm.apply(&mut train_x)?;
        norm.apply(&mut test_x)?;
        Ok(Splits {
            train: Dataset::new(train_x, train_y, Split::Train, norm.clone(), classes)?,
            test: Dataset::new(test_x, test_y, Split::Test, norm, classes)?,
        })
    }
}

/// Raw IDX contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    /// `(N, 1, H, W)` images scaled to `[0, 1]`.
    pub fn to_images(&self) -> Result<Tensor> {
        let &[n, h, w] = self.dims.as_slice() else {
            return Err(Error::Format(format!("expected 3 image dimensions, got {:?}", self.dims)));
        };
        Tensor::new(vec![n, 1, h, w], self.data.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn to_labels(&self) -> Result<Vec<usize>> {
        if self.dims.len() != 1 {
            return Err(Error::Format(format!("expected 1 label dimension, got {:?}", self.dims)));
        }
        Ok(self.data.iter().map(|&b| b as usize).collect())
    }
}

/// Decodes an unsigned-byte IDX buffer (magic `0x00000801` or `0x00000803`).
pub fn decode_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Length(format!("IDX header needs 4 bytes, got {}", bytes.len())));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let ndim = match magic {
        0x0000_0801 => 1,
        0x0000_0803 => 3,
        _ => return Err(Error::Format(format!("bad IDX magic {magic:#010x}"))),
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Length(format!("IDX header needs {header} bytes, got {}", bytes.len())));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("IDX dimensions {dims:?} overflow")))?;
    let body = &bytes[header..];
    if body.len() != payload {
        return Err(Error::Length(format!(
            "IDX dimensions {dims:?} need {payload} payload bytes, file has {}",
            body.len()
        )));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn parse_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    let path = path.as_ref();
    decode_idx(&read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Length(m) => Error::Length(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn idx_pair(images: &Path, labels: &Path) -> Result<(Tensor, Vec<usize>)> {
    let x = parse_idx(images)?.to_images()?;
    let y = parse_idx(labels)?.to_labels()?;
    if x.shape()[0] != y.len() {
        return Err(Error::Length(format!(
            "{} has {} images, {} has {} labels",
            images.display(),
            x.shape()[0],
            labels.display(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l > 9) {
        return Err(Error::Format(format!("{}: label {bad} > 9", labels.display())));
    }
    Ok((x, y))
}

/// MNIST-format IDX files from `root`, standardized with train-split constants.
pub fn load_mnist(root: impl AsRef<Path>) -> Result<Splits> {
    let root = root.as_ref();
    let train = idx_pair(&root.join(MNIST_TRAIN_IMAGES), &root.join(MNIST_TRAIN_LABELS))?;
    let test = idx_pair(&root.join(MNIST_TEST_IMAGES), &root.join(MNIST_TEST_LABELS))?;
    Splits::from_raw(train, test, 10)
}

/// Decodes CIFAR-10 records: one label byte, then 3072 channel-planar pixels.
/// Pixels are scaled to `[0, 1]`.
pub fn decode_cifar10(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    if bytes.is_empty() {
        return Err(Error::EmptySplit("CIFAR-10 file has no records".into()));
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Length(format!(
            "CIFAR-10 length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format(format!("record {i}: label {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?, labels))
}

/// Concatenated records of several CIFAR-10 batch files.
pub fn parse_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<(Tensor, Vec<usize>)> {
    if paths.is_empty() {
        return Err(Error::EmptySplit("no CIFAR-10 files given".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let (x, y) = decode_cifar10(&read(p)?).map_err(|e| match e {
            Error::Length(m) => Error::Length(format!("{}: {m}", p.display())),
            Error::Format(m) => Error::Format(format!("{}: {m}", p.display())),
            Error::EmptySplit(m) => Error::EmptySplit(format!("{}: {m}", p.display())),
            other => other,
        })?;
        images.push(x);
        labels.extend(y);
    }
    Ok((Tensor::concat_rows(&images)?, labels))
}

/// The official binary distribution under `root`, or under
/// `root/cifar-10-batches-bin`.
pub fn load_cifar10(root: impl AsRef<Path>) -> Result<Splits> {
    let mut root: PathBuf = root.as_ref().to_path_buf();
    if !root.join("test_batch.bin").exists() && root.join("cifar-10-batches-bin").is_dir() {
        root = root.join("cifar-10-batches-bin");
    }
    let train: Vec<PathBuf> = (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect();
    let train = parse_cifar10_bin(&train)?;
    let test = parse_cifar10_bin(&[root.join("test_batch.bin")])?;
    Splits::from_raw(train, test, 10)
}

/// I.i.d. standard normal draws.
pub fn synthetic_gaussian(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream_rng(seed, 0);
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Labeled Gaussian blobs: each class has a fixed random template and
/// samples are template plus unit noise. Useful for smoke runs.
pub fn synthetic_splits(train: usize, test: usize, shape: [usize; 3], classes: usize, seed: u64) -> Result<Splits> {
    if classes == 0 {
        return Err(Error::Config("synthetic data needs at least one class".into()));
    }
    let len: usize = shape.iter().product();
    let mut rng = stream_rng(seed, 1);
    let templates: Vec<f64> = (0..classes * len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut make = |n: usize| -> Result<(Tensor, Vec<usize>)> {
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let mut data = Vec::with_capacity(n * len);
        for &l in &labels {
            let t = &templates[l * len..][..len];
            data.extend(t.iter().map(|&v| v + rng.sample::<f64, _>(StandardNormal)));
        }
        Ok((Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?, labels))
    };
    let tr = make(train)?;
    let te = make(test)?;
    Splits::from_raw(tr, te, classes)
}

/// Flip and pad-then-crop augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Zero padding on each side before cropping back to the input size.
    pub pad: usize,
    pub seed: u64,
}

impl AugmentConfig {
    /// Flip with probability 0.5, pad 4.
    pub fn standard(seed: u64) -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            pad: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }
}

/// Shifts one `(C, H, W)` image so that the crop window starts at `(dy, dx)`
/// of the zero-padded image, optionally mirroring it horizontally first.
pub fn transform_image(img: &[f64], shape: [usize; 3], flip: bool, pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let sx = sx as usize;
                let col = if flip { w - 1 - sx } else { sx };
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + col];
            }
        }
    }
    out
}

/// Independently flips and crops every image of an `(N, C, H, W)` batch.
pub fn augment(batch: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    cfg.validate()?;
    let s = batch.dims4()?;
    let len = s.c * s.plane();
    let mut out = Vec::with_capacity(batch.len());
    for img in batch.data().chunks(len) {
        let flip = cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob;
        let dy = rng.random_range(0..=2 * cfg.pad);
        let dx = rng.random_range(0..=2 * cfg.pad);
        out.extend(transform_image(img, [s.c, s.h, s.w], flip, cfg.pad, dy, dx));
    }
    Tensor::new(batch.shape().to_vec(), out)
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 1 << 32 | epoch as u64));
    order
}
