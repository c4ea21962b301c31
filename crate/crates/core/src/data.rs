//! Dataset readers (MNIST IDX, CIFAR-10 binary), the synthetic blob
//! generator, and the deterministic stratified split.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objective::Batch;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;
pub const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_PIXELS: usize = 3072;

/// Labelled images `N x C x H x W` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "images {:?} with {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("a dataset needs at least one sample".into()));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::BadLabel { index, label, classes: class_count });
        }
        Ok(Dataset { images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Gathers the samples at `indices` into a batch, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let [c, h, w] = self.sample_shape();
        let inputs = Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered length matches shape");
        Batch { inputs, labels: indices.iter().map(|&i| self.labels[i]).collect() }
    }

    pub fn full_batch(&self) -> Batch {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.batch(&indices)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let b = self.batch(indices);
        Dataset::new(b.inputs, b.labels, self.class_count)
    }

    /// First `n` samples (or all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let indices: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&indices)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut buf)).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

fn truncated(path: &Path, detail: impl Into<String>) -> Error {
    Error::TruncatedFile { path: path.to_path_buf(), detail: detail.into() }
}

/// Parses an IDX image file body: returns `(count, rows, cols, pixels)`.
fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    if bytes.len() < 16 {
        return Err(truncated(path, format!("{} bytes, header needs 16", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let (n, rows, cols) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let payload = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| truncated(path, "header dimensions overflow"))?;
    if bytes.len() - 16 != payload {
        return Err(truncated(path, format!("header declares {payload} pixel bytes, file has {}", bytes.len() - 16)));
    }
    let pixels = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

fn parse_idx_labels(path: &Path, bytes: &[u8], classes: usize) -> Result<Vec<usize>> {
    if bytes.len() < 8 {
        return Err(truncated(path, format!("{} bytes, header needs 8", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() - 8 != n {
        return Err(truncated(path, format!("header declares {n} labels, file has {}", bytes.len() - 8)));
    }
    bytes[8..]
        .iter()
        .enumerate()
        .map(|(index, &b)| {
            let label = usize::from(b);
            if label < classes {
                Ok(label)
            } else {
                Err(Error::BadLabel { index, label, classes })
            }
        })
        .collect()
}

/// Reads an MNIST-style IDX image/label pair (10 classes).
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (n, rows, cols, pixels) = parse_idx_images(ip, &read_file(ip)?)?;
    let labels = parse_idx_labels(lp, &read_file(lp)?, 10)?;
    if labels.len() != n {
        return Err(Error::CountMismatch { images: n, labels: labels.len() });
    }
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], pixels)?, labels, 10)
}

/// Reads CIFAR-10 binary batches, stopping after `limit` records if given.
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P], limit: Option<usize>) -> Result<Dataset> {
    let limit = limit.unwrap_or(usize::MAX);
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in paths {
        if labels.len() >= limit {
            break;
        }
        let path = path.as_ref();
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(truncated(path, format!("{} bytes is not a multiple of {CIFAR_RECORD_BYTES}", bytes.len())));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
            if labels.len() >= limit {
                break;
            }
            let label = usize::from(record[0]);
            if label >= 10 {
                return Err(Error::BadLabel { index: labels.len(), label, classes: 10 });
            }
            labels.push(label);
            pixels.extend(record[1..].iter().map(|&b| f64::from(b) / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no CIFAR-10 files given".into()));
    }
    debug_assert_eq!(pixels.len(), labels.len() * CIFAR_PIXELS);
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10)
}

/// Mean of class `c` in the blob generator: a scaled axis direction.
pub fn blob_mean(c: usize, dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    mean[c % dim] = 5.0 * (1.0 + (c / dim) as f64);
    mean
}

/// Isotropic unit-variance Gaussian blobs around [`blob_mean`], shaped
/// `[N, dim, 1, 1]`, ordered class by class.
pub fn synth_blobs(classes: usize, dim: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 || per_class == 0 {
        return Err(Error::InvalidArgument(format!(
            "blobs need classes >= 2, dim >= 1, per_class >= 1 (got {classes}, {dim}, {per_class})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let mean = blob_mean(c, dim);
        for _ in 0..per_class {
            for m in &mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + z);
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![classes * per_class, dim, 1, 1], data)?, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_fraction: 0.8, seed: 0 }
    }
}

fn sample_key(seed: u64, label: usize, pixels: &[f64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label as u64).to_le_bytes());
    for v in pixels {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

/// Stratified split: per class, `floor(train_fraction * n_c)` samples go to
/// the training side. Samples are ranked by a seeded hash of their content,
/// so membership does not depend on input order. Both sides keep the input
/// order.
pub fn stratified_split(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {} not in (0, 1)", spec.train_fraction)));
    }
    let counts = data.class_counts();
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c > 0 && c < 2) {
        return Err(Error::ClassTooSmall { class, count });
    }
    let mut by_class: Vec<Vec<(usize, [u8; 32])>> = vec![Vec::new(); data.class_count()];
    for (i, &label) in data.labels().iter().enumerate() {
        by_class[label].push((i, sample_key(spec.seed, label, data.sample(i))));
    }
    let mut in_train = vec![false; data.len()];
    for members in &mut by_class {
        let take = (spec.train_fraction * members.len() as f64).floor() as usize;
        members.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
        for &(i, _) in members.iter().take(take) {
            in_train[i] = true;
        }
    }
    let (train, val): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| in_train[i]);
    Ok((data.subset(&train)?, data.subset(&val)?))
}

/// Standard file names of the prepared datasets below a data root.
#[derive(Debug, Clone)]
pub struct DataLayout {
    pub root: PathBuf,
}

impl DataLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataLayout { root: root.into() }
    }

    pub fn mnist_train(&self) -> (PathBuf, PathBuf) {
        let d = self.root.join("mnist-5k");
        (d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte"))
    }

    pub fn mnist_test(&self) -> (PathBuf, PathBuf) {
        let d = self.root.join("mnist-5k");
        (d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte"))
    }

    pub fn cifar_train(&self) -> Vec<PathBuf> {
        let d = self.root.join("cifar-10-batches-bin");
        (1..=5).map(|i| d.join(format!("data_batch_{i}.bin"))).collect()
    }

    pub fn cifar_test(&self) -> Vec<PathBuf> {
        vec![self.root.join("cifar-10-batches-bin").join("test_batch.bin")]
    }
}
