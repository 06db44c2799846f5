//! Dataset ingestion (IDX binary files), synthetic classification problems,
//! splits and mini-batch sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Batch, Targets};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An in-memory classification dataset: inputs scaled to [0,1] plus class
/// targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::EmptyInput("Dataset::new"));
        }
        if targets.len() != inputs.rows() {
            return Err(Error::DimensionMismatch {
                context: "Dataset::new",
                expected: inputs.rows(),
                actual: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Dataset {
            inputs,
            targets,
            num_classes,
        })
    }

    pub fn n(&self) -> usize {
        self.inputs.rows()
    }

    pub fn d0(&self) -> usize {
        self.inputs.cols()
    }
}

/// Copies the given rows of a dataset into a standalone classification
/// batch, preserving row order.
pub fn batch_from_rows(ds: &Dataset, rows: &[usize]) -> Result<Batch> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("batch_from_rows"));
    }
    let d0 = ds.d0();
    let mut data = Vec::with_capacity(rows.len() * d0);
    let mut targets = Vec::with_capacity(rows.len());
    for &r in rows {
        data.extend_from_slice(ds.inputs.row(r));
        targets.push(ds.targets[r]);
    }
    let inputs = Matrix::new(rows.len(), d0, data)?;
    Batch::new(inputs, Targets::Classes(targets))
}

fn read_u32_be(bytes: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn truncated(path: &Path, expected: usize, actual: usize) -> Error {
    io_error(
        path,
        std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("file holds {actual} bytes but the header requires {expected}"),
        ),
    )
}

/// Loads an IDX image/label file pair (the MNIST container format).
///
/// Images: magic 0x00000803, then [n, rows, cols] as big-endian u32s, then
/// n·rows·cols unsigned bytes. Labels: magic 0x00000801, then [n], then n
/// bytes. Pixels are scaled to [0,1] by /255; the two files must agree on
/// n. The class count is taken as max(label)+1.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| io_error(images_path, e))?;
    if images.len() < 16 {
        return Err(truncated(images_path, 16, images.len()));
    }
    let magic = read_u32_be(&images, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_error(
            images_path,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = read_u32_be(&images, 4) as usize;
    let rows = read_u32_be(&images, 8) as usize;
    let cols = read_u32_be(&images, 12) as usize;
    let expected = 16 + n * rows * cols;
    if images.len() < expected {
        return Err(truncated(images_path, expected, images.len()));
    }
    if images.len() > expected {
        return Err(format_error(
            images_path,
            format!("{} trailing bytes after the pixel data", images.len() - expected),
        ));
    }

    let labels = std::fs::read(labels_path).map_err(|e| io_error(labels_path, e))?;
    if labels.len() < 8 {
        return Err(truncated(labels_path, 8, labels.len()));
    }
    let magic = read_u32_be(&labels, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(format_error(
            labels_path,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n_labels = read_u32_be(&labels, 4) as usize;
    let expected = 8 + n_labels;
    if labels.len() < expected {
        return Err(truncated(labels_path, expected, labels.len()));
    }
    if labels.len() > expected {
        return Err(format_error(
            labels_path,
            format!("{} trailing bytes after the label data", labels.len() - expected),
        ));
    }
    if n_labels != n {
        return Err(format_error(
            labels_path,
            format!("label count {n_labels} does not match image count {n}"),
        ));
    }

    let pixels: Vec<f64> = images[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let inputs = Matrix::new(n, rows * cols, pixels)?;
    let targets: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let num_classes = targets.iter().max().map_or(1, |&m| m + 1);
    Dataset::new(inputs, targets, num_classes)
}

/// Writes a dataset as an IDX image/label pair (inputs quantised to bytes
/// via round(v·255); exact round-trip for byte-valued inputs).
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if ds.num_classes > 256 {
        return Err(Error::InvalidConfig(format!(
            "IDX labels are single bytes; {} classes do not fit",
            ds.num_classes
        )));
    }
    let n = ds.n();
    let d0 = ds.d0();
    let mut images = Vec::with_capacity(16 + n * d0);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(n as u32).to_be_bytes());
    // Flat feature vectors are stored as 1×d0 "images".
    images.extend_from_slice(&1u32.to_be_bytes());
    images.extend_from_slice(&(d0 as u32).to_be_bytes());
    for v in ds.inputs.data() {
        images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }

    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for &t in &ds.targets {
        labels.push(t as u8);
    }

    let mut f = std::fs::File::create(images_path).map_err(|e| io_error(images_path, e))?;
    f.write_all(&images).map_err(|e| io_error(images_path, e))?;
    let mut f = std::fs::File::create(labels_path).map_err(|e| io_error(labels_path, e))?;
    f.write_all(&labels).map_err(|e| io_error(labels_path, e))?;
    Ok(())
}

/// One standard Gaussian draw via Box-Muller.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    // 1−u1 ∈ (0,1] keeps the log finite.
    (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates a separable-by-construction classification problem: class
/// centers sit on a sphere of radius 0.25 around the cube center, samples
/// are centers plus Gaussian noise (clamped into [0,1]), and labels cycle
/// so the class histogram is balanced within ±1.
pub fn synthetic_classification(
    seed: u64,
    n: usize,
    d0: usize,
    classes: usize,
    noise: f64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidConfig("need at least 2 classes".into()));
    }
    if n < classes {
        return Err(Error::InvalidConfig(format!(
            "need at least one sample per class ({n} < {classes})"
        )));
    }
    if d0 == 0 {
        return Err(Error::InvalidConfig("d0 must be positive".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidConfig("noise must be ≥ 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Class centers: random unit directions scaled onto a sphere of radius
    // 0.25 around (0.5, …, 0.5), so noiseless samples stay inside [0,1].
    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut dir: Vec<f64>;
        loop {
            dir = (0..d0).map(|_| gauss(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for v in &mut dir {
                    *v /= norm;
                }
                break;
            }
        }
        centers.push(dir.iter().map(|v| 0.5 + 0.25 * v).collect::<Vec<f64>>());
    }

    let mut data = Vec::with_capacity(n * d0);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        targets.push(c);
        for j in 0..d0 {
            let v = centers[c][j] + noise * gauss(&mut rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Dataset::new(Matrix::new(n, d0, data)?, targets, classes)
}

/// Splits a dataset into train/test by a seeded permutation, cutting at
/// ⌊fraction·n⌋.
pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let n = ds.n();
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidConfig(format!(
            "split of {n} samples at fraction {train_fraction} leaves an empty side"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates, deterministic in the seed.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let take = |idx: &[usize]| -> Result<Dataset> {
        let d0 = ds.d0();
        let mut data = Vec::with_capacity(idx.len() * d0);
        let mut targets = Vec::with_capacity(idx.len());
        for &r in idx {
            data.extend_from_slice(ds.inputs.row(r));
            targets.push(ds.targets[r]);
        }
        Dataset::new(Matrix::new(idx.len(), d0, data)?, targets, ds.num_classes)
    };
    let train = take(&perm[..n_train])?;
    let test = take(&perm[n_train..])?;
    Ok((train, test))
}

/// Draws b indices uniformly without replacement and returns the
/// corresponding batch; deterministic given the RNG state.
pub fn sample_minibatch(ds: &Dataset, b: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let n = ds.n();
    if b == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if b > n {
        return Err(Error::InvalidConfig(format!(
            "batch size {b} exceeds dataset size {n}"
        )));
    }
    // Partial Fisher-Yates: the first b entries become the sample.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..b {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    batch_from_rows(ds, &idx[..b])
}
