//! Dataset ingestion: MNIST IDX files and CIFAR-10 binary batches, with
//! per-channel normalization fitted on the training split.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Undecoded images (`u8` pixels, NCHW) with labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSet {
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    /// `[channels, height, width]`
    pub shape: [usize; 3],
    pub classes: usize,
}

impl RawSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples.
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.pixels.truncate(n * self.shape.iter().product::<usize>());
        self.labels.truncate(n);
        self
    }
}

fn read(path: &Path, what: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Dataset(format!("cannot read {what} at {}: {e}", path.display())))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Parses an IDX image file: big-endian magic `0x00000803`, count, rows, cols.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(Error::Dataset("IDX image file shorter than its 16-byte header".into()));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES {
        return Err(Error::Dataset(format!("IDX image magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let (n, h, w) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let body = &bytes[16..];
    if body.len() != n * h * w {
        return Err(Error::Dataset(format!("IDX header promises {n}x{h}x{w} pixels, file holds {}", body.len())));
    }
    Ok((n, h, w, body.to_vec()))
}

/// Parses an IDX label file: big-endian magic `0x00000801`, count.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(Error::Dataset("IDX label file shorter than its 8-byte header".into()));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS {
        return Err(Error::Dataset(format!("IDX label magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() - 8 != n {
        return Err(Error::Dataset(format!("IDX header promises {n} labels, file holds {}", bytes.len() - 8)));
    }
    Ok(bytes[8..].to_vec())
}

fn check_labels(labels: &[u8], classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l as usize >= classes) {
        Some(i) => Err(Error::Dataset(format!("label {} at index {i} is outside 0..{classes}", labels[i]))),
        None => Ok(()),
    }
}

fn load_idx_pair(dir: &Path, prefix: &str) -> Result<RawSet> {
    let images = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, h, w, pixels) = parse_idx_images(&read(&images, "MNIST IDX images (magic 0x00000803)")?)?;
    let labels = parse_idx_labels(&read(&labels, "MNIST IDX labels (magic 0x00000801)")?)?;
    if labels.len() != n {
        return Err(Error::Dataset(format!("{n} images but {} labels for {prefix}", labels.len())));
    }
    check_labels(&labels, 10)?;
    Ok(RawSet { pixels, labels, shape: [1, h, w], classes: 10 })
}

/// `(train, test)` from `train-*-ubyte` and `t10k-*-ubyte` files in `dir`.
pub fn load_mnist(dir: &Path) -> Result<(RawSet, RawSet)> {
    Ok((load_idx_pair(dir, "train")?, load_idx_pair(dir, "t10k")?))
}

/// Parses concatenated 3073-byte CIFAR-10 records (label, then 3x32x32 pixels).
pub fn parse_cifar(bytes: &[u8]) -> Result<RawSet> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "CIFAR-10 batch of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    check_labels(&labels, 10)?;
    Ok(RawSet { pixels, labels, shape: [3, 32, 32], classes: 10 })
}

fn cifar_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// `(train, test)` from `data_batch_{1..5}.bin` and `test_batch.bin`.
pub fn load_cifar10(dir: &Path) -> Result<(RawSet, RawSet)> {
    let dir = cifar_dir(dir);
    let what = "CIFAR-10 binary batch (3073-byte records)";
    let mut train = parse_cifar(&read(&dir.join("data_batch_1.bin"), what)?)?;
    for i in 2..=5 {
        let more = parse_cifar(&read(&dir.join(format!("data_batch_{i}.bin")), what)?)?;
        train.pixels.extend(more.pixels);
        train.labels.extend(more.labels);
    }
    let test = parse_cifar(&read(&dir.join("test_batch.bin"), what)?)?;
    Ok((train, test))
}

/// Per-channel mean and standard deviation of pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(raw: &RawSet) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Dataset("cannot fit normalization on an empty set".into()));
        }
        let [c, h, w] = raw.shape;
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (i, &p) in raw.pixels.iter().enumerate() {
            let v = p as f64 / 255.0;
            let ch = (i / plane) % c;
            mean[ch] += v;
            sq[ch] += v * v;
        }
        let count = (raw.len() * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1e-8)
            })
            .collect();
        Ok(Normalization { mean, std })
    }
}

/// Normalized images ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub shape: [usize; 3],
    pub classes: usize,
    /// Per-channel value of a raw zero pixel, used to pad shifted crops.
    pub fill: Vec<f32>,
}

/// Random shift (and optionally horizontal flip) applied per training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub pad: usize,
    pub flip: bool,
}

impl Dataset {
    pub fn new(raw: &RawSet, norm: &Normalization) -> Result<Self> {
        let [c, h, w] = raw.shape;
        if norm.mean.len() != c || norm.std.len() != c {
            return Err(Error::Dataset(format!("normalization has {} channels, images {c}", norm.mean.len())));
        }
        let plane = h * w;
        let images = raw
            .pixels
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let ch = (i / plane) % c;
                ((p as f64 / 255.0 - norm.mean[ch]) / norm.std[ch]) as f32
            })
            .collect();
        Ok(Dataset {
            images,
            labels: raw.labels.iter().map(|&l| l as usize).collect(),
            shape: raw.shape,
            classes: raw.classes,
            fill: (0..c).map(|ch| (-norm.mean[ch] / norm.std[ch]) as f32).collect(),
        })
    }

    /// Builds a dataset from already-normalized values.
    pub fn from_parts(images: Vec<f32>, labels: Vec<usize>, shape: [usize; 3], classes: usize) -> Result<Self> {
        if images.len() != labels.len() * shape.iter().product::<usize>() {
            return Err(Error::Dataset(format!("{} values for {} samples of shape {shape:?}", images.len(), labels.len())));
        }
        check_labels(&labels.iter().map(|&l| l.min(255) as u8).collect::<Vec<_>>(), classes)?;
        Ok(Dataset { images, labels, shape, classes, fill: vec![0.0; shape[0]] })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    /// The given samples as an NCHW batch, unaugmented.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        self.batch::<rand_chacha::ChaCha8Rng>(indices, None)
    }

    /// Gathers the given samples into an NCHW batch, optionally shifting each
    /// by up to `pad` pixels (uncovered pixels take the raw-zero value) and
    /// flipping it horizontally at random.
    pub fn batch<R: Rng>(
        &self,
        indices: &[usize],
        augment: Option<(&mut R, Augment)>,
    ) -> Result<(Tensor<f32>, Vec<usize>)> {
        let [c, h, w] = self.shape;
        let len = self.sample_len();
        let mut out = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        let mut augment = augment;
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("sample {i} out of range for {} samples", self.len())));
            }
            let src = &self.images[i * len..(i + 1) * len];
            match augment.as_mut() {
                None => out.extend_from_slice(src),
                Some((rng, aug)) => {
                    let pad = aug.pad as isize;
                    let flip = aug.flip && rng.gen_bool(0.5);
                    let dy = rng.gen_range(-pad..=pad);
                    let dx = rng.gen_range(-pad..=pad);
                    for ch in 0..c {
                        for y in 0..h as isize {
                            for x in 0..w as isize {
                                let sy = y + dy;
                                let sx0 = x + dx;
                                let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                                let inside = (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx0);
                                out.push(if inside { src[ch * h * w + sy as usize * w + sx as usize] } else { self.fill[ch] });
                            }
                        }
                    }
                }
            }
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], out)?, labels))
    }
}
