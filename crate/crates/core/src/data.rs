//! Datasets, splits and file loaders.
//!
//! Supported sources: IDX files (MNIST layout), CIFAR-10 binary batches, and
//! a seeded synthetic image classification task. Pixels are scaled to
//! `[0, 1]`; the synthetic generator produces roughly zero-centred values.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled images, `N x H x W x C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "images {:?} vs {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[h, w, c]` of one example.
    pub fn example_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.select_rows(idx)?;
        Ok((images, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (images, labels) = self.batch(idx)?;
        Self::new(images, labels, self.classes)
    }

    /// Consecutive chunks of at most `size` examples, in order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Result<(Tensor, Vec<usize>)>> + '_ {
        let n = self.len();
        (0..n).step_by(size.max(1)).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(n)).collect();
            self.batch(&idx)
        })
    }

    /// Average-pools `factor x factor` blocks; trailing rows/columns that do
    /// not fill a block are dropped.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor <= 1 {
            return Ok(self.clone());
        }
        let [h, w, c] = self.example_shape();
        let (ho, wo) = (h / factor, w / factor);
        if ho == 0 || wo == 0 {
            return Err(Error::Config(format!("downsample factor {factor} too large for {h}x{w}")));
        }
        let x = self.images.data();
        let mut out = Vec::with_capacity(self.len() * ho * wo * c);
        let norm = (factor * factor) as f64;
        for n in 0..self.len() {
            for oy in 0..ho {
                for ox in 0..wo {
                    for k in 0..c {
                        let mut acc = 0.0f64;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                acc += x[((n * h + oy * factor + dy) * w + ox * factor + dx) * c + k] as f64;
                            }
                        }
                        out.push((acc / norm) as f32);
                    }
                }
            }
        }
        Self::new(Tensor::new(vec![self.len(), ho, wo, c], out)?, self.labels.clone(), self.classes)
    }
}

/// Endless shuffled batches; reshuffles at every epoch boundary.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut s = Self { order: (0..len).collect(), pos: 0, batch_size, rng };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Idx,
    CifarBin,
    Synthetic,
}

/// Parameters of the synthetic task.
///
/// Each class is a fixed arrangement of oriented sinusoidal patches drawn
/// from a shared pool of parts, so telling classes apart needs both the
/// part detectors and their layout. Samples add a random shift, a random
/// contrast and Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub examples: usize,
    pub parts: usize,
    pub parts_per_class: usize,
    pub noise: f64,
    pub max_shift: i64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
            classes: 6,
            examples: 3000,
            parts: 6,
            parts_per_class: 3,
            noise: 0.25,
            max_shift: 2,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
struct Part {
    orientation: f64,
    frequency: f64,
    phase: f64,
    sigma: f64,
    color: Vec<f64>,
}

/// Generates the synthetic task described by `cfg`.
pub fn synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.examples == 0 || cfg.parts == 0 || cfg.parts_per_class == 0 {
        return Err(Error::Config("synthetic task needs >= 2 classes, examples and parts".into()));
    }
    if cfg.height == 0 || cfg.width == 0 || cfg.channels == 0 {
        return Err(Error::Config("synthetic images need positive extents".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let parts: Vec<Part> = (0..cfg.parts)
        .map(|_| Part {
            orientation: rng.random_range(0.0..PI),
            frequency: rng.random_range(0.6..1.6),
            phase: rng.random_range(0.0..2.0 * PI),
            sigma: rng.random_range(1.2..2.2),
            color: (0..cfg.channels).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    // (part index, centre y, centre x) per class
    let layouts: Vec<Vec<(usize, f64, f64)>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.parts_per_class)
                .map(|_| {
                    (
                        rng.random_range(0..cfg.parts),
                        rng.random_range(0.2 * h..0.8 * h),
                        rng.random_range(0.2 * w..0.8 * w),
                    )
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(cfg.examples * cfg.height * cfg.width * cfg.channels);
    let mut labels = Vec::with_capacity(cfg.examples);
    for i in 0..cfg.examples {
        let label = i % cfg.classes;
        labels.push(label);
        let dy = rng.random_range(-cfg.max_shift..=cfg.max_shift) as f64;
        let dx = rng.random_range(-cfg.max_shift..=cfg.max_shift) as f64;
        let contrast = rng.random_range(0.7..1.3);
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let mut px = vec![0.0f64; cfg.channels];
                for &(p, cy, cx) in &layouts[label] {
                    let part = &parts[p];
                    let (ry, rx) = (y as f64 - cy - dy, x as f64 - cx - dx);
                    let env = (-(ry * ry + rx * rx) / (2.0 * part.sigma * part.sigma)).exp();
                    let along = rx * part.orientation.cos() + ry * part.orientation.sin();
                    let wave = (part.frequency * along + part.phase).cos();
                    for (v, col) in px.iter_mut().zip(&part.color) {
                        *v += contrast * env * wave * col;
                    }
                }
                for v in px {
                    data.push((v + noise.sample(&mut rng)) as f32);
                }
            }
        }
    }
    let images = Tensor::new(vec![cfg.examples, cfg.height, cfg.width, cfg.channels], data)?;
    Dataset::new(images, labels, cfg.classes)
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX header; returns the dimensions and the payload offset.
fn idx_header(bytes: &[u8], expect_dims: u8) -> Result<(Vec<usize>, usize)> {
    let magic = read_u32_be(bytes, 0)?;
    let (dtype, ndims) = ((magic >> 8) & 0xff, (magic & 0xff) as u8);
    if magic >> 16 != 0 || dtype != 0x08 || ndims != expect_dims {
        return Err(Error::Format(format!(
            "bad IDX magic {magic:#010x}, expected {:#010x}",
            0x0800 | expect_dims as u32
        )));
    }
    let dims = (0..ndims as usize)
        .map(|d| read_u32_be(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let offset = 4 + 4 * ndims as usize;
    let need: usize = dims.iter().product();
    if bytes.len() < offset + need {
        return Err(Error::Format(format!(
            "IDX payload truncated: {} bytes, need {}",
            bytes.len() - offset,
            need
        )));
    }
    Ok((dims, offset))
}

/// IDX image file (magic `0x00000803`) as `N x rows x cols x 1` in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let (dims, off) = idx_header(bytes, 3)?;
    let n: usize = dims.iter().product();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let data = bytes[off..off + n].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![dims[0], dims[1], dims[2], 1], data)
}

/// IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (dims, off) = idx_header(bytes, 1)?;
    Ok(bytes[off..off + dims[0]].iter().map(|&b| b as usize).collect())
}

pub const CIFAR_RECORD: usize = 1 + 32 * 32 * 3;

/// CIFAR-10 binary batch: records of one label byte followed by the red,
/// green and blue 32x32 planes. Returns `N x 32 x 32 x 3` and labels.
pub fn parse_cifar_bin(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR batch length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format(format!("CIFAR label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        let planes = &rec[1..];
        for p in 0..1024 {
            for ch in 0..3 {
                data.push(planes[ch * 1024 + p] as f32 / 255.0);
            }
        }
    }
    Ok((Tensor::new(vec![n, 32, 32, 3], data)?, labels))
}

/// Where the examples come from and how to split them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub kind: DatasetKind,
    /// IDX: `[images, labels]`; CIFAR: one or more batch files.
    #[serde(default)]
    pub paths: Vec<PathBuf>,
    /// Zero means every example not held out for evaluation.
    #[serde(default)]
    pub train_size: usize,
    /// Size of the assessment subset of the training split.
    pub assessment_size: usize,
    pub eval_size: usize,
    #[serde(default = "one")]
    pub downsample: usize,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl Default for DatasetDescriptor {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            paths: Vec::new(),
            train_size: 0,
            assessment_size: 256,
            eval_size: 600,
            downsample: 1,
            synthetic: SyntheticConfig::default(),
            seed: 0,
        }
    }
}

/// Training data, the assessment subset used for importance scoring, and the
/// held-out evaluation data.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub assessment: Dataset,
    pub eval: Dataset,
}

/// Splits `pool` deterministically: evaluation examples are held out first,
/// the assessment set is drawn from the training examples.
pub fn split(pool: &Dataset, desc: &DatasetDescriptor) -> Result<Splits> {
    let n = pool.len();
    if desc.eval_size == 0 || desc.assessment_size == 0 {
        return Err(Error::Config("evaluation and assessment sets must be non-empty".into()));
    }
    if desc.eval_size >= n {
        return Err(Error::Config(format!("eval size {} leaves no training data out of {n}", desc.eval_size)));
    }
    let available = n - desc.eval_size;
    let train_size = if desc.train_size == 0 { available } else { desc.train_size };
    if train_size > available || desc.assessment_size > train_size {
        return Err(Error::Config(format!(
            "split sizes exceed the data: train {train_size}, assessment {}, eval {}, total {n}",
            desc.assessment_size, desc.eval_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(desc.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let eval_idx = &order[..desc.eval_size];
    let train_idx = &order[desc.eval_size..desc.eval_size + train_size];
    let mut assess_pos: Vec<usize> = (0..train_size).collect();
    assess_pos.shuffle(&mut rng);
    let assess_idx: Vec<usize> = assess_pos[..desc.assessment_size].iter().map(|&p| train_idx[p]).collect();
    Ok(Splits {
        train: pool.subset(train_idx)?,
        assessment: pool.subset(&assess_idx)?,
        eval: pool.subset(eval_idx)?,
    })
}

pub fn load_dataset(desc: &DatasetDescriptor) -> Result<Splits> {
    let pool = match desc.kind {
        DatasetKind::Synthetic => synthetic(&desc.synthetic)?,
        DatasetKind::Idx => {
            let [images, labels] = desc.paths.as_slice() else {
                return Err(Error::Config("IDX datasets need [images, labels] paths".into()));
            };
            let images = parse_idx_images(&std::fs::read(images)?)?;
            let labels = parse_idx_labels(&std::fs::read(labels)?)?;
            if labels.len() != images.shape()[0] {
                return Err(Error::Format(format!(
                    "{} images but {} labels",
                    images.shape()[0],
                    labels.len()
                )));
            }
            let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
            Dataset::new(images, labels, classes)?
        }
        DatasetKind::CifarBin => {
            if desc.paths.is_empty() {
                return Err(Error::Config("CIFAR datasets need at least one batch file".into()));
            }
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for p in &desc.paths {
                let (t, l) = parse_cifar_bin(&std::fs::read(p)?)?;
                data.extend(t.into_data());
                labels.extend(l);
            }
            let n = labels.len();
            Dataset::new(Tensor::new(vec![n, 32, 32, 3], data)?, labels, 10)?
        }
    };
    let pool = pool.downsample(desc.downsample)?;
    split(&pool, desc)
}
