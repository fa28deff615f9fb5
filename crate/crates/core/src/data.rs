//! Datasets: synthetic generators, the IDX loader, semi-supervised splits and
//! batch sampling.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Inputs with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    labels: Option<Vec<usize>>,
    class_count: usize,
    /// Factor that took raw values to features (1/255 for IDX images).
    feature_scale: f64,
}

impl Dataset {
    pub fn new(
        inputs: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
        class_count: usize,
        feature_scale: f64,
    ) -> Result<Self> {
        if let Some(first) = inputs.first() {
            let dim = first.len();
            if dim == 0 {
                return Err(Error::ShapeMismatch(
                    "inputs must be non-empty vectors".into(),
                ));
            }
            if let Some(bad) = inputs.iter().position(|x| x.len() != dim) {
                return Err(Error::ShapeMismatch(format!(
                    "input {bad} has dimension {} instead of {dim}",
                    inputs[bad].len()
                )));
            }
        }
        if inputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset inputs"));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.len() {
                return Err(Error::CountMismatch {
                    images: inputs.len(),
                    labels: l.len(),
                });
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= class_count) {
                return Err(Error::InvalidConfig(format!(
                    "label {bad} out of range for {class_count} classes"
                )));
            }
        }
        if !(feature_scale > 0.0 && feature_scale.is_finite()) {
            return Err(Error::InvalidConfig(
                "feature scale must be positive".into(),
            ));
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
            feature_scale,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Input dimension; 0 for an empty dataset.
    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_scale(&self) -> f64 {
        self.feature_scale
    }

    /// Labels, or `ConfigMismatch` when the dataset is unlabeled.
    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::ConfigMismatch("dataset has no labels".into()))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in self.labels.iter().flatten() {
            counts[y] += 1;
        }
        counts
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
            feature_scale: self.feature_scale,
        }
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn without_labels(mut self) -> Dataset {
        self.labels = None;
        self
    }
}

/// Two interleaved half-circles of radius 1.
///
/// Class 0 is `(cos t, sin t)`, class 1 is `(1 − cos t, 0.5 − sin t)`, with
/// `t` evenly spaced on `[0, π]`; class 0 gets `⌊n/2⌋` points. Gaussian noise
/// of standard deviation `noise` is added to both coordinates.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidConfig("two moons needs n >= 2".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidConfig("noise must be finite and >= 0".into()));
    }
    let n_out = n / 2;
    let n_in = n - n_out;
    let angles = |k: usize| -> Vec<f64> {
        if k == 1 {
            return vec![0.0];
        }
        (0..k).map(|i| PI * i as f64 / (k - 1) as f64).collect()
    };
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for t in angles(n_out) {
        inputs.push(vec![t.cos(), t.sin()]);
        labels.push(0);
    }
    for t in angles(n_in) {
        inputs.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, noise).expect("valid std");
        for x in &mut inputs {
            for v in x.iter_mut() {
                *v += dist.sample(&mut rng);
            }
        }
    }
    Dataset::new(inputs, Some(labels), 2, 1.0)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::TruncatedFile {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parsed IDX image file: `(rows, cols, images)` with raw byte pixels.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<&[u8]>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let expected = 16 + count * size;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    let images = (0..count)
        .map(|i| &bytes[16 + i * size..16 + (i + 1) * size])
        .collect();
    Ok((rows, cols, images))
}

/// Parsed IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            found: bytes.len(),
        });
    }
    Ok(&bytes[8..expected])
}

/// Builds a dataset from IDX image and label bytes; pixels are divided by 255.
pub fn idx_from_bytes(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (_, _, imgs) = parse_idx_images(images)?;
    let labs = parse_idx_labels(labels)?;
    if imgs.len() != labs.len() {
        return Err(Error::CountMismatch {
            images: imgs.len(),
            labels: labs.len(),
        });
    }
    let inputs = imgs
        .iter()
        .map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    let labels: Vec<usize> = labs.iter().map(|&b| usize::from(b)).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, Some(labels), class_count, 1.0 / 255.0)
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())));
    idx_from_bytes(&read(images.as_ref())?, &read(labels.as_ref())?)
}

/// Class-balanced labeled subset plus the unlabeled remainder.
///
/// Each class gets `⌊n_labeled/M⌋` samples, and the remainder goes one each
/// to the lowest class indices. Both outputs keep the original sample order.
pub fn split_semisup(d: &Dataset, n_labeled: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let labels = d.require_labels()?;
    if n_labeled > d.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot label {n_labeled} of {} samples",
            d.len()
        )));
    }
    let m = d.class_count();
    if m == 0 {
        return Err(Error::InvalidConfig("dataset has no classes".into()));
    }
    let per_class = n_labeled / m;
    let extra = n_labeled % m;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; d.len()];
    for (class, members) in by_class.iter_mut().enumerate() {
        let required = per_class + usize::from(class < extra);
        if members.len() < required {
            return Err(Error::InsufficientClassSamples {
                class,
                available: members.len(),
                required,
            });
        }
        members.shuffle(&mut rng);
        for &i in &members[..required] {
            chosen[i] = true;
        }
    }
    let (lab, unlab): (Vec<usize>, Vec<usize>) = (0..d.len()).partition(|&i| chosen[i]);
    Ok((d.subset(&lab), d.subset(&unlab).without_labels()))
}

/// Index batches for one iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Epoch-wise labeled batches paired with an independently cycling stream of
/// unlabeled batches.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n_labeled: usize,
    n_unlabeled: usize,
    batch_labeled: usize,
    batch_unlabeled: usize,
    unlabeled_order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(
        n_labeled: usize,
        n_unlabeled: usize,
        batch_labeled: usize,
        batch_unlabeled: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_labeled == 0 || batch_unlabeled == 0 {
            return Err(Error::InvalidConfig("batch sizes must be >= 1".into()));
        }
        if n_labeled == 0 {
            return Err(Error::InvalidConfig("no labeled samples".into()));
        }
        Ok(Self {
            n_labeled,
            n_unlabeled,
            batch_labeled,
            batch_unlabeled,
            unlabeled_order: Vec::new(),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Batches of one epoch: a shuffled pass over the labeled set (the last
    /// batch may be short), each paired with `batch_unlabeled` unlabeled
    /// indices drawn without replacement from a reshuffled cycle.
    pub fn epoch(&mut self) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.n_labeled).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks(self.batch_labeled)
            .map(|chunk| Batch {
                labeled: chunk.to_vec(),
                unlabeled: self.next_unlabeled(),
            })
            .collect()
    }

    fn next_unlabeled(&mut self) -> Vec<usize> {
        if self.n_unlabeled == 0 {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(self.batch_unlabeled);
        while out.len() < self.batch_unlabeled {
            if self.cursor == self.unlabeled_order.len() {
                self.unlabeled_order = (0..self.n_unlabeled).collect();
                self.unlabeled_order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.unlabeled_order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
