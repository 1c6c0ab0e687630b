//! Dataset ingestion: IDX (MNIST) and CIFAR-10 binary batches, plus seeded
//! train / eval / cross-validation splitting.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;

use crate::dropout::stream_rng;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Labelled images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::dims("images vs labels", &images.dims(), &[labels.len()]));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

/// Reads a file, transparently gunzipping `*.gz`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(0, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(buf: &[u8], offset: usize) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(offset as u64, "truncated IDX header"))
}

/// Parses an IDX3 image file. Pixels are scaled to [0, 1]; dims (N, 1, H, W).
pub fn parse_idx_images(buf: &[u8]) -> Result<Tensor4> {
    let magic = be_u32(buf, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(buf, 4)? as usize;
    let h = be_u32(buf, 8)? as usize;
    let w = be_u32(buf, 12)? as usize;
    let len = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format(4, "IDX dims overflow"))?;
    let body = &buf[16..];
    if body.len() != len {
        let offset = 16 + body.len().min(len);
        return Err(Error::format(
            offset as u64,
            format!("IDX image payload is {} bytes, header implies {len}", body.len()),
        ));
    }
    Tensor4::new([n, 1, h, w], body.iter().map(|&b| f64::from(b) / 255.0).collect())
        .map_err(|e| Error::format(4, e.to_string()))
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(buf, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(buf, 4)? as usize;
    let body = &buf[8..];
    if body.len() != n {
        return Err(Error::format(
            (8 + body.len().min(n)) as u64,
            format!("IDX label payload is {} bytes, header implies {n}", body.len()),
        ));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

pub fn load_idx_images(path: &Path) -> Result<Tensor4> {
    parse_idx_images(&read_maybe_gz(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    parse_idx_labels(&read_maybe_gz(path)?)
}

/// Loads an IDX image/label pair into a dataset.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    Dataset::new(load_idx_images(images)?, load_idx_labels(labels)?)
}

/// Parses a CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes
/// (R, G, B planes, row-major).
pub fn parse_cifar10_batch(buf: &[u8]) -> Result<Dataset> {
    if buf.is_empty() {
        return Err(Error::format(0, "empty CIFAR batch"));
    }
    if buf.len() % CIFAR_RECORD != 0 {
        let offset = buf.len() - buf.len() % CIFAR_RECORD;
        return Err(Error::format(
            offset as u64,
            format!("file size {} is not a multiple of the {CIFAR_RECORD}-byte record", buf.len()),
        ));
    }
    let n = buf.len() / CIFAR_RECORD;
    let plane = CIFAR_RECORD - 1;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * plane);
    for (i, rec) in buf.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format((i * CIFAR_RECORD) as u64, format!("label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new(Tensor4::new([n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?, labels)
}

pub fn load_cifar10_batch(path: &Path) -> Result<Dataset> {
    parse_cifar10_batch(&read_maybe_gz(path)?)
}

/// Train / eval / cross-validation partition of one dataset.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub eval: Dataset,
    pub cross_val: Dataset,
    pub train_fraction: f64,
}

/// Index sets of a split, for inspection and tests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub cross_val: Vec<usize>,
}

/// Shuffles `0..n` with `seed`, keeps `train_fraction` for training, and splits
/// the held-out pool 80:20 into eval and cross-validation sets.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::param(format!("train fraction must be in [0, 1], got {train_fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, &[0x5911_7]));
    let n_train = (n as f64 * train_fraction).round() as usize;
    let pool = n - n_train;
    let n_eval = (pool as f64 * 0.8).round() as usize;
    let cross_val = idx.split_off(n_train + n_eval);
    let eval = idx.split_off(n_train);
    Ok(SplitIndices { train: idx, eval, cross_val })
}

pub fn split_dataset(data: &Dataset, train_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    let s = split_indices(data.len(), train_fraction, seed)?;
    Ok(DatasetSplit {
        train: data.select(&s.train),
        eval: data.select(&s.eval),
        cross_val: data.select(&s.cross_val),
        train_fraction,
    })
}
