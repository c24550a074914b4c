//! Datasets: IDX (MNIST) parsing, synthetic blobs, and deterministic batching.

use crate::error::{Error, Result};
use crate::init::{Seed, XorShift32};
use crate::nn::Matrix;
use flate2::read::GzDecoder;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

/// Samples-by-features matrix with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<f32>,
    pub dims: usize,
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f32>, dims: usize, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if dims == 0 || features.len() != dims * labels.len() {
            return Err(Error::Config(format!(
                "feature matrix of {} values does not hold {} rows of {} dims",
                features.len(),
                labels.len(),
                dims
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Config(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self {
            features,
            dims,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            features: self.features[range.start * self.dims..range.end * self.dims].to_vec(),
            dims: self.dims,
            labels: self.labels[range].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Splits off the last `holdout` rows.
    pub fn split_tail(&self, holdout: usize) -> (Dataset, Dataset) {
        let cut = self.len().saturating_sub(holdout);
        (self.slice(0..cut), self.slice(cut..self.len()))
    }

    /// Gathers the given rows into a feature block and a label block.
    pub fn gather(&self, rows: &[usize]) -> (Matrix<f32>, Vec<u8>) {
        let mut data = Vec::with_capacity(rows.len() * self.dims);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        (Matrix::from_vec(rows.len(), self.dims, data), labels)
    }
}

/// Decoded contents of one IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    Labels(Vec<u8>),
    /// Images flattened row-major and scaled to `[0, 1]`.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<f32>,
    },
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset,
            message: format!("truncated header: need 4 bytes, file has {}", bytes.len()),
        })
}

/// Parses an uncompressed IDX label (`0x801`) or image (`0x803`) file.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_be_u32(bytes, 0)?;
    match magic {
        IDX_LABELS_MAGIC => {
            let count = read_be_u32(bytes, 4)? as usize;
            let payload = &bytes[8..];
            check_payload(payload.len(), count, 8)?;
            Ok(IdxData::Labels(payload.to_vec()))
        }
        IDX_IMAGES_MAGIC => {
            let count = read_be_u32(bytes, 4)? as usize;
            let rows = read_be_u32(bytes, 8)? as usize;
            let cols = read_be_u32(bytes, 12)? as usize;
            if rows == 0 || cols == 0 {
                return Err(Error::Parse {
                    offset: 8,
                    message: format!("degenerate image dimensions {rows}x{cols}"),
                });
            }
            let payload = &bytes[16..];
            check_payload(payload.len(), count * rows * cols, 16)?;
            let pixels = payload.iter().map(|&p| p as f32 / 255.0).collect();
            Ok(IdxData::Images {
                count,
                rows,
                cols,
                pixels,
            })
        }
        other => Err(Error::Parse {
            offset: 0,
            message: format!("bad magic 0x{other:08x}, expected 0x00000801 or 0x00000803"),
        }),
    }
}

fn check_payload(actual: usize, expected: usize, header_len: usize) -> Result<()> {
    use std::cmp::Ordering;
    match actual.cmp(&expected) {
        Ordering::Equal => Ok(()),
        Ordering::Less => Err(Error::Parse {
            offset: header_len + actual,
            message: format!("truncated payload: header declares {expected} bytes, found {actual}"),
        }),
        Ordering::Greater => Err(Error::Parse {
            offset: header_len + expected,
            message: format!("{} trailing bytes after declared payload", actual - expected),
        }),
    }
}

/// Inverse of [`parse_idx`]; pixels are requantized to bytes.
pub fn serialize_idx(data: &IdxData) -> Vec<u8> {
    match data {
        IdxData::Labels(labels) => {
            let mut out = Vec::with_capacity(8 + labels.len());
            out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
            out
        }
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => {
            let mut out = Vec::with_capacity(16 + pixels.len());
            out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
            for d in [*count, *rows, *cols] {
                out.extend_from_slice(&(d as u32).to_be_bytes());
            }
            out.extend(pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
            out
        }
    }
}

/// Reads an IDX file, transparently gunzipping it when it starts with the gzip magic.
pub fn read_idx_file(path: &Path) -> Result<IdxData> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut decoded = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut decoded)
            .map_err(|e| Error::io(path, e))?;
        parse_idx(&decoded)
    } else {
        parse_idx(&raw)
    }
}

/// Builds a dataset from an image file and a label file.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (count, dims, pixels) = match read_idx_file(images)? {
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => (count, rows * cols, pixels),
        IdxData::Labels(_) => {
            return Err(Error::Parse {
                offset: 0,
                message: format!("{} holds labels, expected images", images.display()),
            })
        }
    };
    let labels = match read_idx_file(labels)? {
        IdxData::Labels(l) => l,
        IdxData::Images { .. } => {
            return Err(Error::Parse {
                offset: 0,
                message: format!("{} holds images, expected labels", labels.display()),
            })
        }
    };
    if labels.len() != count {
        return Err(Error::Parse {
            offset: 4,
            message: format!("{count} images but {} labels", labels.len()),
        });
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    Dataset::new(pixels, dims, labels, num_classes)
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found"),
    ))
}

/// Number of training rows held out for validation.
pub const MNIST_VALIDATION_ROWS: usize = 10_000;

/// Official MNIST training set (60,000 rows) from a directory of IDX files.
pub fn load_mnist_train(dir: &Path) -> Result<Dataset> {
    load_idx_pair(
        &find_idx(dir, "train-images-idx3-ubyte")?,
        &find_idx(dir, "train-labels-idx1-ubyte")?,
    )
}

pub fn load_mnist_test(dir: &Path) -> Result<Dataset> {
    load_idx_pair(
        &find_idx(dir, "t10k-images-idx3-ubyte")?,
        &find_idx(dir, "t10k-labels-idx1-ubyte")?,
    )
}

/// Training and validation sets: the last 10,000 training rows are the validation set.
pub fn load_mnist_split(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok(load_mnist_train(dir)?.split_tail(MNIST_VALIDATION_ROWS))
}

/// Gaussian clusters, one per class, at centers drawn uniformly from `[0.1, 0.9]^dims`.
/// Features are clamped to `[0, 1]`; rows are grouped by class.
pub fn synth_blobs(
    seed: Seed,
    num_classes: usize,
    dims: usize,
    samples_per_class: usize,
    spread: f64,
) -> Dataset {
    synth_blobs_stream(seed, 1, num_classes, dims, samples_per_class, spread)
}

/// Like [`synth_blobs`] with an explicit noise stream, so several sample sets
/// can share one set of centers (stream 0 is reserved for the centers).
pub fn synth_blobs_stream(
    seed: Seed,
    noise_stream: u64,
    num_classes: usize,
    dims: usize,
    samples_per_class: usize,
    spread: f64,
) -> Dataset {
    assert!(noise_stream != 0, "stream 0 draws the centers");
    assert!(dims >= 1, "dims must be at least 1");
    assert!((1..=256).contains(&num_classes), "num_classes must fit a byte label");
    let mut centers = XorShift32::keyed(seed, 0);
    let centers: Vec<f64> = (0..num_classes * dims)
        .map(|_| 0.1 + 0.8 * centers.next_unit())
        .collect();
    let mut noise = XorShift32::keyed(seed, noise_stream);
    let mut features = Vec::with_capacity(num_classes * samples_per_class * dims);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for c in 0..num_classes {
        for _ in 0..samples_per_class {
            for d in 0..dims {
                let z = noise.next_normal();
                let x = centers[c * dims + d] + spread * z;
                features.push(x.clamp(0.0, 1.0) as f32);
            }
            labels.push(c as u8);
        }
    }
    Dataset {
        features,
        dims,
        labels,
        num_classes,
    }
}

/// Sample ordering for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub epoch_seed: Seed,
    pub epoch_index: usize,
    pub order: Vec<usize>,
}

impl BatchPlan {
    /// Fisher–Yates permutation of `0..samples` keyed by `(epoch_seed, epoch_index)`.
    pub fn new(samples: usize, batch_size: usize, epoch_seed: Seed, epoch_index: usize) -> Self {
        assert!(batch_size > 0, "batch_size must be positive");
        let mut order: Vec<usize> = (0..samples).collect();
        let mut rng = XorShift32::keyed(epoch_seed, epoch_index as u64);
        for i in (1..samples).rev() {
            let j = rng.below(i as u32 + 1) as usize;
            order.swap(i, j);
        }
        Self {
            batch_size,
            epoch_seed,
            epoch_index,
            order,
        }
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Index chunks, the last one possibly short.
    pub fn index_batches(&self) -> std::slice::Chunks<'_, usize> {
        self.order.chunks(self.batch_size)
    }
}

/// Feature and label blocks in plan order.
pub fn shuffled_batches<'a>(
    dataset: &'a Dataset,
    plan: &'a BatchPlan,
) -> impl Iterator<Item = (Matrix<f32>, Vec<u8>)> + 'a {
    plan.index_batches().map(move |rows| dataset.gather(rows))
}
