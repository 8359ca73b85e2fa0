//! IDX image/label files (the MNIST container format).
//!
//! Big-endian header: magic `0x00000803` (u8 images, 3 dims) or
//! `0x00000801` (u8 labels, 1 dim), then one u32 per dimension, then the
//! raw bytes.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    let b = bytes.get(offset..end).ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        offset: bytes.len(),
        needed: end,
    })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Header dimensions and payload of one IDX file.
fn parse(bytes: &[u8], path: &Path, magic: u32, ndim: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected: magic,
        });
    }
    let dims = (0..ndim)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let needed = start + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed,
        });
    }
    if bytes.len() > needed {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("{} trailing bytes after offset {needed}", bytes.len() - needed),
        });
    }
    Ok((dims, bytes[start..needed].to_vec()))
}

/// Loads an image/label pair; pixels are scaled by `1/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path, num_classes: usize, split: Split) -> Result<Dataset> {
    let (idims, pixels) = parse(&read(images_path)?, images_path, IMAGES_MAGIC, 3)?;
    let (ldims, labels) = parse(&read(labels_path)?, labels_path, LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images_path: images_path.to_path_buf(),
            images: idims[0],
            labels_path: labels_path.to_path_buf(),
            labels: ldims[0],
        });
    }
    if idims.contains(&0) {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            msg: "empty image set".into(),
        });
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| usize::from(y) >= num_classes) {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            msg: format!("label {y} at offset {} is not below {num_classes}", 8 + i),
        });
    }
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let images = Tensor::new(vec![idims[0], 1, idims[1], idims[2]], data)?;
    Dataset::new(images, labels.into_iter().map(usize::from).collect(), num_classes, split)
}

/// Encodes `(count, rows, cols)` u8 images as an IDX file body.
pub fn encode_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [count, rows, cols] {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
