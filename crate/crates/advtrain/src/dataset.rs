//! MNIST-style IDX ingestion, splits, batching, and a synthetic fixture.
//!
//! IDX is the big-endian binary container the raw MNIST files use: a u32
//! magic word, one u32 per dimension, then the raw unsigned bytes. The
//! parsers here take untrusted bytes and validate everything (magic,
//! dimension count, payload length) before touching the payload; they are
//! the crate's fuzzing entry points alongside the checkpoint parser.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Which role a split plays; carried along for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

/// An in-memory dataset: N x d pixel matrix in [0,1] plus one class label
/// per row. Immutable after construction.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub name: SplitName,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Raw decoded IDX image container.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "truncated at byte {}: {what} needs 4 bytes",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().expect("4 bytes")))
}

/// Decode an IDX image file (magic 0x00000803, dims count x rows x cols).
/// The payload length is validated against the header before any copy.
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32_be(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "not an IDX image file: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let count = read_u32_be(bytes, 4, "image count")? as usize;
    let rows = read_u32_be(bytes, 8, "row count")? as usize;
    let cols = read_u32_be(bytes, 12, "column count")? as usize;
    let expected = (count as u128) * (rows as u128) * (cols as u128);
    let payload = &bytes[16..];
    if (payload.len() as u128) < expected {
        return Err(Error::Format(format!(
            "truncated at byte {}: header promises {expected} pixel bytes, found {}",
            bytes.len(),
            payload.len()
        )));
    }
    if (payload.len() as u128) > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after {expected} pixel bytes",
            payload.len() as u128 - expected
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: payload.to_vec(),
    })
}

/// Decode an IDX label file (magic 0x00000801, one dimension).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "not an IDX label file: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let count = read_u32_be(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::Format(format!(
            "truncated at byte {}: header promises {count} labels, found {}",
            bytes.len(),
            payload.len()
        )));
    }
    if payload.len() > count {
        return Err(Error::Format(format!(
            "{} trailing bytes after {count} labels",
            payload.len() - count
        )));
    }
    Ok(payload.to_vec())
}

/// Encode an IDX image container.
pub fn idx_images_bytes(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    out
}

/// Encode an IDX label container.
pub fn idx_labels_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Load an image/label IDX pair into a normalized dataset: pixels divided
/// by 255 into [0,1], images flattened to one row per example.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    name: SplitName,
) -> Result<DatasetSplit> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes =
        std::fs::read(images_path).map_err(|e| Error::io(images_path.display().to_string(), e))?;
    let label_bytes =
        std::fs::read(labels_path).map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    let images = parse_idx_images(&image_bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", images_path.display())))?;
    let labels = parse_idx_labels(&label_bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", labels_path.display())))?;
    if images.count != labels.len() {
        return Err(Error::Data(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Data(format!("label {bad} outside 0..=9")));
    }
    let dim = images.rows * images.cols;
    let data: Vec<f64> = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok(DatasetSplit {
        images: Tensor::from_vec(images.count, dim, data)?,
        labels,
        name,
    })
}

/// Load the four standard MNIST files from one directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(DatasetSplit, DatasetSplit)> {
    let dir = dir.as_ref();
    let train = load_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
        SplitName::Train,
    )?;
    let test = load_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
        SplitName::Test,
    )?;
    Ok((train, test))
}

/// Carve the last `validation_count` rows off in file order. Both halves
/// preserve the original ordering.
pub fn split_train_validation(
    data: &DatasetSplit,
    validation_count: usize,
) -> Result<(DatasetSplit, DatasetSplit)> {
    let n = data.len();
    if validation_count == 0 || validation_count >= n {
        return Err(Error::Config(format!(
            "validation count {validation_count} must lie in 1..{n}"
        )));
    }
    let cut = n - validation_count;
    let head: Vec<usize> = (0..cut).collect();
    let tail: Vec<usize> = (cut..n).collect();
    Ok((
        DatasetSplit {
            images: data.images.select_rows(&head),
            labels: data.labels[..cut].to_vec(),
            name: SplitName::Train,
        },
        DatasetSplit {
            images: data.images.select_rows(&tail),
            labels: data.labels[cut..].to_vec(),
            name: SplitName::Validation,
        },
    ))
}

/// Deterministic mini-batch iterator: one Fisher-Yates shuffle drawn from
/// the rng at construction, every example exactly once per epoch, final
/// short batch included.
pub struct Batches<'a> {
    data: &'a DatasetSplit,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

pub fn batches<'a>(data: &'a DatasetSplit, batch_size: usize, rng: &mut RngState) -> Batches<'a> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.next_below(i + 1);
        order.swap(i, j);
    }
    Batches {
        data,
        order,
        batch_size,
        cursor: 0,
    }
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<u8>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let x = self.data.images.select_rows(idx);
        let y = idx.iter().map(|&i| self.data.labels[i]).collect();
        Some((x, y))
    }
}

/// Parameters of the synthetic two-blob fixture.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub per_class: usize,
    pub dimension: usize,
    /// Class means sit at 0.5 +/- this offset on every coordinate.
    pub mean_offset: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            per_class: 200,
            dimension: 784,
            mean_offset: 0.15,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

/// Two Gaussian blobs clipped into the unit box: class 0 centered at
/// 0.5 - offset, class 1 at 0.5 + offset, per coordinate. Linearly
/// separable with overwhelming margin at the default settings.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    if spec.per_class == 0 || spec.dimension == 0 {
        return Err(Error::Config(
            "synthetic fixture needs per_class >= 1 and dimension >= 1".to_string(),
        ));
    }
    if !spec.mean_offset.is_finite() || !spec.noise_std.is_finite() || spec.noise_std < 0.0 {
        return Err(Error::Config("synthetic spec values must be finite".to_string()));
    }
    let mut rng = RngState::substream(spec.seed, "synthetic");
    let n = 2 * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dimension);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2u8 {
        let mean = if class == 0 {
            0.5 - spec.mean_offset
        } else {
            0.5 + spec.mean_offset
        };
        for _ in 0..spec.per_class {
            for _ in 0..spec.dimension {
                let v = mean + spec.noise_std * rng.next_gaussian();
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    Ok(DatasetSplit {
        images: Tensor::from_vec(n, spec.dimension, data)?,
        labels,
        name: SplitName::Train,
    })
}
