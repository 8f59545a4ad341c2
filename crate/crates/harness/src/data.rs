//! MNIST IDX and CIFAR-10 binary readers.

use std::fs;
use std::path::{Path, PathBuf};

use dcnet::Tensor;

use crate::error::{io_err, HarnessError, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
/// One label byte followed by the R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;

/// Images in `[0, 1]`, stored `[n, c, h, w]`, with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// The first `n` examples.
    pub fn truncate(mut self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(HarnessError::Config(format!(
                "subset of {n} requested from a dataset of {}",
                self.len()
            )));
        }
        self.images.truncate(n * self.image_len());
        self.labels.truncate(n);
        Ok(self)
    }

    /// Stacks the selected examples into a `[b, c, h, w]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i] as usize);
        }
        let t = Tensor::new(
            &[indices.len(), self.channels, self.height, self.width],
            data,
        )?;
        Ok((t, labels))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn format_err(path: &Path, message: impl Into<String>) -> HarnessError {
    HarnessError::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    if bytes.len() < 16 {
        return Err(format_err(path, "truncated IDX image header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            path,
            format!("bad IDX image magic {magic:#010x}"),
        ));
    }
    let (n, rows, cols) = (
        be_u32(bytes, 4) as usize,
        be_u32(bytes, 8) as usize,
        be_u32(bytes, 12) as usize,
    );
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!(
                "IDX image file has {} bytes, header implies {expected}",
                bytes.len()
            ),
        ));
    }
    let pixels = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(format_err(path, "truncated IDX label header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            path,
            format!("bad IDX label magic {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(format_err(
            path,
            format!(
                "IDX label file has {} bytes, header implies {}",
                bytes.len(),
                8 + n
            ),
        ));
    }
    let labels = bytes[8..].to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(format_err(path, format!("label {bad} outside 0..=9")));
    }
    Ok(labels)
}

fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read(images)?, images)?;
    let labels_v = parse_idx_labels(&read(labels)?, labels)?;
    if labels_v.len() != n {
        return Err(format_err(
            labels,
            format!("{} labels for {n} images", labels_v.len()),
        ));
    }
    Ok(Dataset {
        images: pixels,
        labels: labels_v,
        channels: 1,
        height: rows,
        width: cols,
    })
}

/// Reads the four standard MNIST files from `dir`; returns `(train, test)`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let file = |name: &str| dir.join(name);
    let train = load_idx_pair(
        &file("train-images-idx3-ubyte"),
        &file("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx_pair(
        &file("t10k-images-idx3-ubyte"),
        &file("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// Parses concatenated 3073-byte CIFAR-10 records.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(format_err(
            path,
            format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        if record[0] > 9 {
            return Err(format_err(
                path,
                format!("label {} outside 0..=9", record[0]),
            ));
        }
        labels.push(record[0]);
        images.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Dataset {
        images,
        labels,
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
    })
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut out = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
    };
    for p in parts {
        out.images.extend(p.images);
        out.labels.extend(p.labels);
    }
    out
}

/// Reads `data_batch_1.bin` … `data_batch_5.bin` and `test_batch.bin`;
/// missing training batches are skipped as long as one is present.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = Vec::new();
    for i in 1..=5 {
        let path: PathBuf = dir.join(format!("data_batch_{i}.bin"));
        if path.exists() {
            train.push(parse_cifar10(&read(&path)?, &path)?);
        }
    }
    if train.is_empty() {
        return Err(format_err(dir, "no data_batch_*.bin files"));
    }
    let test_path = dir.join("test_batch.bin");
    let test = parse_cifar10(&read(&test_path)?, &test_path)?;
    Ok((concat(train), test))
}
