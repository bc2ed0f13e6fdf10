//! Loader for big-endian IDX image/label files (the MNIST container
//! format).

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::LabeledDataset;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: {field} is {found:#010x}, expected {expected:#010x}")]
    MagicMismatch { path: PathBuf, field: &'static str, expected: u32, found: u32 },
    #[error("images file has {images} items but labels file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: truncated while reading {field}")]
    Truncated { path: PathBuf, field: &'static str },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

struct Reader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path) -> Result<Self, IdxError> {
        let bytes = fs::read(path)
            .map_err(|source| IdxError::Io { path: path.to_path_buf(), source })?;
        Ok(Reader { path, bytes, pos: 0 })
    }

    fn u32_be(&mut self, field: &'static str) -> Result<u32, IdxError> {
        let end = self.pos + 4;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| IdxError::Truncated {
            path: self.path.to_path_buf(),
            field,
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(slice.try_into().unwrap()))
    }

    fn bytes(&mut self, n: usize, field: &'static str) -> Result<&[u8], IdxError> {
        let end = self.pos + n;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| IdxError::Truncated {
            path: self.path.to_path_buf(),
            field,
        })?;
        self.pos = end;
        Ok(slice)
    }
}

/// Parses an IDX image file (magic 0x00000803) and its label file (magic
/// 0x00000801) into a dataset: pixels scaled to [0, 1], rows flattened
/// row-major, class count = max label + 1 (at least 2).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset, IdxError> {
    let mut images = Reader::open(images_path)?;
    let magic = images.u32_be("images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(IdxError::MagicMismatch {
            path: images_path.to_path_buf(),
            field: "images magic",
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let n_images = images.u32_be("image count")? as usize;
    let rows = images.u32_be("row count")? as usize;
    let cols = images.u32_be("column count")? as usize;

    let mut labels = Reader::open(labels_path)?;
    let magic = labels.u32_be("labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(IdxError::MagicMismatch {
            path: labels_path.to_path_buf(),
            field: "labels magic",
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n_labels = labels.u32_be("label count")? as usize;
    if n_images != n_labels {
        return Err(IdxError::CountMismatch { images: n_images, labels: n_labels });
    }

    let pixels_per_image = rows * cols;
    let pixel_bytes = images.bytes(n_images * pixels_per_image, "pixel data")?;
    let label_bytes = labels.bytes(n_labels, "label data")?;

    let n_classes = label_bytes.iter().copied().max().map_or(2, |m| (m as usize + 1).max(2));
    let mut ds = LabeledDataset::new(pixels_per_image, n_classes);
    let mut row_buf = vec![0.0; pixels_per_image];
    for (i, &label) in label_bytes.iter().enumerate() {
        let start = i * pixels_per_image;
        for (dst, &byte) in row_buf.iter_mut().zip(&pixel_bytes[start..start + pixels_per_image]) {
            *dst = byte as f64 / 255.0;
        }
        ds.push(&row_buf, label as usize);
    }
    Ok(ds)
}
