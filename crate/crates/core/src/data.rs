//! Dataset loading and batching.
//!
//! Three sources: MNIST-style IDX files, CSV with the label in the first
//! column, and Gaussian blobs for fast tests. Features are stored already
//! normalized; the affine parameters used are kept in [`Normalization`] so the
//! raw values can be recovered.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CodeqError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;

/// `normalized = (raw * input_scale - mean) / std`, applied per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_scale: f64,
    pub mean: f64,
    pub std: f64,
    /// Statistics of the raw values before normalization.
    pub raw_mean: f64,
    pub raw_std: f64,
}

impl Normalization {
    pub fn identity(raw: &[f64]) -> Self {
        let (raw_mean, raw_std) = mean_std(raw);
        Normalization {
            input_scale: 1.0,
            mean: 0.0,
            std: 1.0,
            raw_mean,
            raw_std,
        }
    }

    pub fn apply(&self, raw: f64) -> f64 {
        (raw * self.input_scale - self.mean) / self.std
    }

    pub fn invert(&self, normalized: f64) -> f64 {
        (normalized * self.std + self.mean) / self.input_scale
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `[n, sample_shape...]`.
    pub features: Vec<f64>,
    pub sample_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        sample_shape: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        let d = Self {
            features,
            sample_shape,
            labels,
            num_classes,
            normalization,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(CodeqError::Domain("num_classes must be >= 1".into()));
        }
        let dim = self.sample_len();
        if dim == 0 || self.features.len() != self.labels.len() * dim {
            return Err(CodeqError::Shape(format!(
                "{} feature values for {} samples of shape {:?}",
                self.features.len(),
                self.labels.len(),
                self.sample_shape
            )));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return Err(CodeqError::Domain(format!(
                "label {l} at sample {i} outside [0, {})",
                self.num_classes
            )));
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(CodeqError::Domain(format!(
                "non-finite feature {} at sample {}",
                self.features[i],
                i / dim
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.sample_len();
        &self.features[i * d..(i + 1) * d]
    }

    /// Gather the given sample indices into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            features,
            sample_shape: self.sample_shape.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
        }
    }

    /// First `n` samples and the rest, after a seeded shuffle.
    pub fn split(&self, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if n > self.len() {
            return Err(CodeqError::Domain(format!(
                "cannot split {n} samples off a dataset of {}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok((self.subset(&idx[..n]), self.subset(&idx[n..])))
    }

    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(CodeqError::Domain("batch_size must be >= 1".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        Ok(Batches {
            data: self,
            order,
            batch_size,
            pos: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut features = Vec::with_capacity(idx.len() * self.data.sample_len());
        for &i in idx {
            features.extend_from_slice(self.data.sample(i));
        }
        Some(Batch {
            features,
            labels: idx.iter().map(|&i| self.data.labels[i]).collect(),
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CodeqError::io(path, e))
}

fn format_err(path: &Path, message: String) -> CodeqError {
    CodeqError::Format {
        path: path.to_path_buf(),
        message,
    }
}

fn truncated(path: &Path, need: usize, have: usize) -> CodeqError {
    CodeqError::io(
        path,
        std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("truncated IDX file: need {need} bytes, have {have}"),
        ),
    )
}

fn idx_header(buf: &[u8], path: &Path, magic: u32, rank: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * rank;
    if buf.len() < 4 {
        return Err(truncated(path, 4, buf.len()));
    }
    let found = u32::from_be_bytes(buf[..4].try_into().unwrap());
    if found != magic {
        return Err(format_err(path, format!("bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    if buf.len() < header {
        return Err(truncated(path, header, buf.len()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let need = header + dims.iter().product::<usize>();
    if buf.len() < need {
        return Err(truncated(path, need, buf.len()));
    }
    Ok(dims)
}

/// Load an IDX image/label pair. Pixels are scaled to `[0, 1]` and then
/// standardized with the MNIST mean and std.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_file(ip)?;
    let labels = read_file(lp)?;
    let idims = idx_header(&images, ip, IDX_IMAGES_MAGIC, 3)?;
    let ldims = idx_header(&labels, lp, IDX_LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(format_err(
            lp,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    let raw: Vec<f64> = images[16..16 + idims.iter().product::<usize>()]
        .iter()
        .map(|&p| f64::from(p))
        .collect();
    let (raw_mean, raw_std) = mean_std(&raw);
    let norm = Normalization {
        input_scale: 1.0 / 255.0,
        mean: MNIST_MEAN,
        std: MNIST_STD,
        raw_mean,
        raw_std,
    };
    let features = raw.iter().map(|&p| norm.apply(p)).collect();
    let labels: Vec<usize> = labels[8..8 + ldims[0]].iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(features, vec![1, idims[1], idims[2]], labels, num_classes, norm)
}

/// Write an IDX image/label pair.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    pixels: &[u8],
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if pixels.len() != n * rows * cols {
        return Err(CodeqError::Shape(format!(
            "{} pixels for {n} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, img).map_err(|e| CodeqError::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| CodeqError::io(lp, e))
}

/// Label in the first column, features after it. A header row is detected by
/// a first cell that does not parse as an integer. Features are not rescaled.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_path(path)
        .map_err(|e| format_err(path, e.to_string()))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format_err(path, e.to_string()))?;
        let first = record.get(0).unwrap_or("").trim();
        let Ok(label) = first.parse::<usize>() else {
            if row == 0 {
                continue;
            }
            return Err(format_err(path, format!("line {}: bad label {first:?}", row + 1)));
        };
        let w = record.len() - 1;
        if w == 0 {
            return Err(format_err(path, format!("line {}: no feature columns", row + 1)));
        }
        if *width.get_or_insert(w) != w {
            return Err(format_err(path, format!("line {}: {w} features, expected {}", row + 1, width.unwrap())));
        }
        for cell in record.iter().skip(1) {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| format_err(path, format!("line {}: bad feature {cell:?}", row + 1)))?;
            features.push(v);
        }
        labels.push(label);
    }
    let Some(width) = width else {
        return Err(CodeqError::Empty("CSV file has no data rows"));
    };
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    let norm = Normalization::identity(&features);
    Dataset::new(features, vec![width], labels, num_classes, norm)
}

/// Isotropic Gaussian clusters around centers drawn uniformly from
/// `[-1, 1]^dims`. Labels cycle through the classes so class sizes differ by
/// at most one.
pub fn synthetic_blobs(n: usize, dims: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || dims == 0 || classes == 0 {
        return Err(CodeqError::Domain(format!(
            "synthetic_blobs needs positive sizes, got n={n} dims={dims} classes={classes}"
        )));
    }
    let noise = Normal::new(0.0, spread).map_err(|e| CodeqError::Domain(format!("spread {spread}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..classes * dims).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut features = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..dims {
            features.push(centers[c * dims + j] + noise.sample(&mut rng));
        }
        labels.push(c);
    }
    let norm = Normalization::identity(&features);
    Dataset::new(features, vec![dims], labels, classes, norm)
}

/// MNIST-shaped stand-in: `[1, 28, 28]` samples whose central 14×14 window
/// holds a 196-dimensional blob and whose border is constant zero, like the
/// empty margin of MNIST digits.
pub fn mnist_like_blobs(n: usize, classes: usize, spread: f64, seed: u64) -> Result<Dataset> {
    const SIDE: usize = 28;
    const INNER: usize = 14;
    const OFFSET: usize = (SIDE - INNER) / 2;
    let core = synthetic_blobs(n, INNER * INNER, classes, spread, seed)?;
    let mut features = vec![0.0; n * SIDE * SIDE];
    for i in 0..n {
        let src = core.sample(i);
        let dst = &mut features[i * SIDE * SIDE..(i + 1) * SIDE * SIDE];
        for r in 0..INNER {
            let row = (r + OFFSET) * SIDE + OFFSET;
            dst[row..row + INNER].copy_from_slice(&src[r * INNER..(r + 1) * INNER]);
        }
    }
    let norm = Normalization::identity(&features);
    Dataset::new(features, vec![1, SIDE, SIDE], core.labels, classes, norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_like_layout() {
        let d = mnist_like_blobs(5, 3, 0.5, 2).unwrap();
        assert_eq!(d.sample_shape, vec![1, 28, 28]);
        let s = d.sample(1);
        assert!(s[..7 * 28].iter().all(|&v| v == 0.0));
        assert!(s[7 * 28 + 7] != 0.0);
        assert_eq!(s[7 * 28 + 6], 0.0);
    }

    #[test]
    fn batch_sizes_and_order() {
        let d = synthetic_blobs(10, 2, 3, 0.1, 0).unwrap();
        let sizes: Vec<usize> = d.batches(4, None).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let labels: Vec<usize> = d.batches(4, None).unwrap().flat_map(|b| b.labels).collect();
        assert_eq!(labels, d.labels);
        let a: Vec<Batch> = d.batches(3, Some(5)).unwrap().collect();
        let b: Vec<Batch> = d.batches(3, Some(5)).unwrap().collect();
        assert_eq!(a, b);
        assert!(d.batches(0, None).is_err());
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = synthetic_blobs(50, 3, 4, 0.2, 9).unwrap();
        assert_eq!(a, synthetic_blobs(50, 3, 4, 0.2, 9).unwrap());
        assert_ne!(a.features, synthetic_blobs(50, 3, 4, 0.2, 10).unwrap().features);
        let one = synthetic_blobs(20, 2, 1, 0.1, 0).unwrap();
        assert!(one.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn split_partitions() {
        let d = synthetic_blobs(30, 2, 3, 0.1, 1).unwrap();
        let (a, b) = d.split(10, 2).unwrap();
        assert_eq!((a.len(), b.len()), (10, 20));
        assert!(d.split(31, 0).is_err());
    }

    #[test]
    fn normalization_inverts() {
        let n = Normalization {
            input_scale: 1.0 / 255.0,
            mean: MNIST_MEAN,
            std: MNIST_STD,
            raw_mean: 0.0,
            raw_std: 0.0,
        };
        assert!((n.invert(n.apply(200.0)) - 200.0).abs() < 1e-9);
        assert!((n.apply(0.0) + MNIST_MEAN / MNIST_STD).abs() < 1e-15);
    }
}
