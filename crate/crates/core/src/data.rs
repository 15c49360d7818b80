//! Datasets, CIFAR binary ingestion, seeded splits and synthetic generators.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;
pub const CIFAR10_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR10_TEST_FILE: &str = "test_batch.bin";
pub const CIFAR100_TRAIN_FILE: &str = "train.bin";
pub const CIFAR100_TEST_FILE: &str = "test.bin";

/// Labeled images `N×C×H×W` with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::dim(format!("{} labels for images of shape {:?}", labels.len(), images.shape())));
        }
        if labels.is_empty() {
            return Err(Error::arg("empty dataset"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Dataset { name: name.into(), images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, e.g. `[3, 32, 32]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::arg(format!("index {bad} out of range for {} samples", self.len())));
        }
        Ok(Dataset {
            name: self.name.clone(),
            images: self.images.gather_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// FNV-1a over shape, pixel bits and labels.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for &s in self.images.shape() {
            eat(&(s as u64).to_le_bytes());
        }
        for v in self.images.data() {
            eat(&v.to_bits().to_le_bytes());
        }
        for &l in &self.labels {
            eat(&(l as u64).to_le_bytes());
        }
        h
    }
}

/// Reads CIFAR binary records. `label_bytes` is 1 for CIFAR-10 and 2 for
/// CIFAR-100, whose second byte (the fine label) is used.
pub fn read_cifar_file(path: &Path, label_bytes: usize, limit: Option<usize>) -> Result<(Vec<usize>, Vec<f64>)> {
    let record = label_bytes + CIFAR_IMAGE_BYTES;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("size {} bytes is not a positive multiple of the {record}-byte record", bytes.len()),
        });
    }
    let n = (bytes.len() / record).min(limit.unwrap_or(usize::MAX));
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_IMAGE_BYTES);
    for rec in bytes.chunks_exact(record).take(n) {
        labels.push(rec[label_bytes - 1] as usize);
        pixels.extend(rec[label_bytes..].iter().map(|&p| p as f64 / 255.0));
    }
    Ok((labels, pixels))
}

fn load_files(dir: &Path, files: &[&str], label_bytes: usize, classes: usize, name: &str) -> Result<Dataset> {
    let expected = |f: &str| Error::Format {
        path: dir.join(f),
        msg: format!("missing; expected a file of {}-byte records", label_bytes + CIFAR_IMAGE_BYTES),
    };
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in files {
        let path = dir.join(f);
        if !path.is_file() {
            return Err(expected(f));
        }
        let (l, p) = read_cifar_file(&path, label_bytes, None)?;
        if let Some(bad) = l.iter().find(|&&v| v >= classes) {
            return Err(Error::Format { path, msg: format!("label {bad} out of range for {classes} classes") });
        }
        labels.extend(l);
        pixels.extend(p);
    }
    let n = labels.len();
    Dataset::new(name, Tensor::new(&[n, 3, 32, 32], pixels)?, labels, classes)
}

/// CIFAR-10 binary version: `(train, test)` from `data_batch_{1..5}.bin` and
/// `test_batch.bin` in `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir, "cifar-10-batches-bin");
    let train = load_files(&dir, &CIFAR10_TRAIN_FILES, 1, 10, "cifar10")?;
    let test = load_files(&dir, &[CIFAR10_TEST_FILE], 1, 10, "cifar10")?;
    Ok((train, test))
}

/// CIFAR-100 binary version with fine labels.
pub fn load_cifar100(dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir, "cifar-100-binary");
    let train = load_files(&dir, &[CIFAR100_TRAIN_FILE], 2, 100, "cifar100")?;
    let test = load_files(&dir, &[CIFAR100_TEST_FILE], 2, 100, "cifar100")?;
    Ok((train, test))
}

/// Accepts either the extraction directory or the archive's inner folder.
fn resolve_dir(dir: &Path, inner: &str) -> PathBuf {
    let nested = dir.join(inner);
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Writes `images` (values in `[0, 1]`, `N×3×32×32`) as CIFAR binary records.
pub fn write_cifar_file(path: &Path, dataset: &Dataset, label_bytes: usize) -> Result<()> {
    if dataset.sample_shape() != [3, 32, 32] {
        return Err(Error::dim("CIFAR records hold 3×32×32 images"));
    }
    let mut out = Vec::with_capacity(dataset.len() * (label_bytes + CIFAR_IMAGE_BYTES));
    for (i, &l) in dataset.labels.iter().enumerate() {
        if l > u8::MAX as usize {
            return Err(Error::arg(format!("label {l} does not fit in a byte")));
        }
        out.extend(std::iter::repeat_n(0u8, label_bytes - 1));
        out.push(l as u8);
        out.extend(dataset.images.row(i).iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Disjoint index sets into the training pool.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeSplit {
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub r_percent: f64,
    pub seed: u64,
}

impl RegimeSplit {
    /// Labeled plus unlabeled indices in ascending order.
    pub fn train_idx(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.labeled_idx.iter().chain(&self.unlabeled_idx).copied().collect();
        all.sort_unstable();
        all
    }
}

/// `round(r/100 · n_train)`.
pub fn labeled_count(n_train: usize, r_percent: f64) -> usize {
    (r_percent / 100.0 * n_train as f64).round() as usize
}

/// Validation indices come first from a seeded permutation. The labeled set
/// is the prefix of a class-stratified ordering of the remaining indices:
/// classes are visited round-robin in a seeded order, each yielding its next
/// sample from its own seeded permutation. Prefixes of one ordering make
/// labeled sets nested across `r` for a fixed seed, and every prefix keeps
/// class counts within one of each other while classes have samples left.
pub fn make_split(dataset: &Dataset, val_fraction: f64, r_percent: f64, seed: u64) -> Result<RegimeSplit> {
    if !(r_percent > 0.0 && r_percent <= 100.0) {
        return Err(Error::arg(format!("regime r = {r_percent} outside (0, 100]")));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::arg(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let n = dataset.len();
    let n_val = (val_fraction * n as f64).round() as usize;
    let mut rng = Rng::with_stream(seed, streams::SPLIT);
    let perm = rng.permutation(n);
    let mut val_idx = perm[..n_val].to_vec();
    let mut train = perm[n_val..].to_vec();
    train.sort_unstable();
    val_idx.sort_unstable();
    let n_labeled = labeled_count(train.len(), r_percent);
    if n_labeled == 0 {
        return Err(Error::arg(format!("r = {r_percent}% of {} training samples is zero labeled samples", train.len())));
    }
    let order = stratified_order(dataset, &train, &mut rng);
    let mut labeled_idx = order[..n_labeled].to_vec();
    let mut unlabeled_idx = order[n_labeled..].to_vec();
    labeled_idx.sort_unstable();
    unlabeled_idx.sort_unstable();
    Ok(RegimeSplit { labeled_idx, unlabeled_idx, val_idx, r_percent, seed })
}

fn stratified_order(dataset: &Dataset, train: &[usize], rng: &mut Rng) -> Vec<usize> {
    let k = dataset.num_classes;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in train {
        per_class[dataset.labels[i]].push(i);
    }
    for bucket in &mut per_class {
        rng.shuffle(bucket);
    }
    let class_order = rng.permutation(k);
    let mut cursor = vec![0usize; k];
    let mut out = Vec::with_capacity(train.len());
    while out.len() < train.len() {
        for &c in &class_order {
            if cursor[c] < per_class[c].len() {
                out.push(per_class[c][cursor[c]]);
                cursor[c] += 1;
            }
        }
    }
    out
}

/// Zero-mean Gaussian vectors with covariance `Q·diag(λ)·Qᵀ` for a seeded
/// random orthogonal `Q`.
#[derive(Clone, Debug)]
pub struct GaussianStream {
    q: Tensor,
    eigvals: Vec<f64>,
    rng: Rng,
}

/// Builds a planted-covariance stream. `Q` is the orthogonal factor of a
/// Gaussian matrix with the signs of `R`'s diagonal folded in.
pub fn synth_gaussian_stream(dim: usize, eigvals: &[f64], seed: u64) -> Result<GaussianStream> {
    if dim == 0 || eigvals.len() != dim {
        return Err(Error::arg(format!("{} eigenvalues for dimension {dim}", eigvals.len())));
    }
    if eigvals.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::arg("eigenvalues must be positive"));
    }
    let mut rng = Rng::with_stream(seed, streams::SYNTH);
    let a = Tensor::normal(&[dim, dim], 0.0, 1.0, &mut rng);
    let q = orthonormal_columns(&a);
    Ok(GaussianStream { q, eigvals: eigvals.to_vec(), rng })
}

/// Modified Gram-Schmidt on the columns of a square matrix.
fn orthonormal_columns(a: &Tensor) -> Tensor {
    let d = a.shape()[0];
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|i| a.data()[i * d + j]).collect()).collect();
    for j in 0..d {
        for k in 0..j {
            let proj: f64 = cols[j].iter().zip(&cols[k]).map(|(x, y)| x * y).sum();
            let (head, tail) = cols.split_at_mut(j);
            for (x, y) in tail[0].iter_mut().zip(&head[k]) {
                *x -= proj * y;
            }
        }
        let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut cols[j] {
            *x /= norm;
        }
    }
    let mut out = Tensor::zeros(&[d, d]);
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out.data_mut()[i * d + j] = *v;
        }
    }
    out
}

impl GaussianStream {
    /// Columns are the planted eigenvectors, in the order of `eigvals`.
    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn eigvals(&self) -> &[f64] {
        &self.eigvals
    }

    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    /// `n × dim` batch.
    pub fn next_batch(&mut self, n: usize) -> Tensor {
        let d = self.dim();
        let mut out = vec![0.0; n * d];
        let mut z = vec![0.0; d];
        for row in out.chunks_exact_mut(d) {
            for (zi, l) in z.iter_mut().zip(&self.eigvals) {
                *zi = self.rng.normal() * l.sqrt();
            }
            for (i, r) in row.iter_mut().enumerate() {
                *r = (0..d).map(|j| self.q.data()[i * d + j] * z[j]).sum();
            }
        }
        Tensor::new(&[n, d], out).expect("shape is consistent")
    }
}

/// Parameters of the synthetic texture dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureConfig {
    pub num_classes: usize,
    pub size: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig { num_classes: 10, size: 32, noise: 0.15 }
    }
}

/// CIFAR-shaped stand-in: each class is an (orientation, spatial frequency)
/// pair; every image is a grating of its class with random phase, contrast,
/// colour tint and a random-position blob occluder, plus pixel noise. Classes
/// are only separable through local oriented structure, so first-layer
/// filters matter.
pub fn synth_textures(n: usize, config: &TextureConfig, seed: u64, stream_offset: u64) -> Result<Dataset> {
    if n == 0 || config.num_classes == 0 || config.size == 0 {
        return Err(Error::arg("synthetic dataset needs samples, classes and a size"));
    }
    let mut rng = Rng::with_stream(seed, streams::TEXTURES + stream_offset);
    let s = config.size;
    let k = config.num_classes;
    let orientations = k.div_ceil(2);
    let mut pixels = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        labels.push(label);
        let theta = std::f64::consts::PI * (label % orientations) as f64 / orientations as f64
            + rng.uniform_range(-0.15, 0.15);
        let freq = if label < orientations { 2.0 } else { 4.5 } * std::f64::consts::TAU / s as f64;
        let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
        let contrast = rng.uniform_range(0.2, 0.45);
        let base = rng.uniform_range(0.35, 0.65);
        let tint: [f64; 3] = [rng.uniform_range(0.6, 1.0), rng.uniform_range(0.6, 1.0), rng.uniform_range(0.6, 1.0)];
        let (cx, cy) = (rng.uniform_range(0.0, s as f64), rng.uniform_range(0.0, s as f64));
        let radius = rng.uniform_range(3.0, 8.0);
        let blob = rng.uniform_range(0.0, 1.0);
        let (ct, st) = (theta.cos(), theta.sin());
        for t in tint {
            for y in 0..s {
                for x in 0..s {
                    let u = x as f64 * ct + y as f64 * st;
                    let mut v = base + contrast * t * (freq * u + phase).sin();
                    let dist2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    if dist2 < radius * radius {
                        v = blob;
                    }
                    v += config.noise * rng.normal();
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    // Interleaved labels would make any contiguous subset balanced; shuffle
    // so splits have to stratify on their own.
    let perm = rng.permutation(n);
    let images = Tensor::new(&[n, 3, s, s], pixels)?.gather_rows(&perm);
    let labels = perm.iter().map(|&p| labels[p]).collect();
    Dataset::new("textures", images, labels, k)
}
