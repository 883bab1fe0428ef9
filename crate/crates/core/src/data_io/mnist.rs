//! Reader for the IDX files MNIST is distributed in.
//!
//! Header: 4-byte big-endian magic (`0x00000803` for `u8` rank-3 image
//! arrays, `0x00000801` for `u8` rank-1 label arrays), then one big-endian
//! `u32` per dimension, then the raw bytes.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, IdxError, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

struct IdxArray<'a> {
    dims: Vec<usize>,
    payload: &'a [u8],
}

fn be_u32(bytes: &[u8], at: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            needed: at + 4,
            have: bytes.len(),
        })
}

fn parse_idx(bytes: &[u8], expected_magic: u32) -> std::result::Result<IdxArray<'_>, IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected_magic {
        return Err(IdxError::BadMagic {
            found: magic,
            expected: expected_magic,
        });
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let header = 4 + 4 * rank;
    let needed = header + dims.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    Ok(IdxArray {
        dims,
        payload: &bytes[header..needed],
    })
}

/// Parses in-memory image and label files. Pixels are scaled by `1/255`.
pub fn parse_mnist(images: &[u8], labels: &[u8]) -> std::result::Result<Dataset, (bool, IdxError)> {
    let img = parse_idx(images, IMAGE_MAGIC).map_err(|e| (true, e))?;
    let lab = parse_idx(labels, LABEL_MAGIC).map_err(|e| (false, e))?;
    let (n, width) = (img.dims[0], img.dims[1] * img.dims[2]);
    if n != lab.dims[0] {
        return Err((
            false,
            IdxError::CountMismatch {
                images: n,
                labels: lab.dims[0],
            },
        ));
    }
    let pixels = img.payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    let points = Tensor::new(vec![n, width], pixels).map_err(|_| (true, IdxError::Empty))?;
    Ok(Dataset {
        points,
        name: "mnist".into(),
        normalization: "pixels / 255".into(),
        labels: Some(lab.payload.iter().map(|&l| l as usize).collect()),
    })
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_mnist(&images, &labels).map_err(|(in_images, reason)| Error::Idx {
        path: if in_images { images_path } else { labels_path }.to_path_buf(),
        reason,
    })
}
