//! IDX files: big-endian magic, big-endian u32 extents, unsigned-byte payload.

use std::path::Path;

use crate::data::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Parses a 3-D image file into `(count, rows, cols, pixels/255)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    check_magic(bytes, IMAGE_MAGIC, path)?;
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u32>> {
    check_magic(bytes, LABEL_MAGIC, path)?;
    let n = read_u32(bytes, 4, path)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| u32::from(b)).collect())
}

/// Loads an IDX image file and, optionally, its label file.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let (n, rows, cols, pixels) = parse_idx_images(&bytes, images_path)?;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Shape(format!(
            "{}: empty image file ({n} × {rows} × {cols})",
            images_path.display()
        )));
    }
    let labels = match labels_path {
        Some(p) => {
            let lb = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            let labels = parse_idx_labels(&lb, p)?;
            if labels.len() != n {
                return Err(Error::CountMismatch {
                    images: n,
                    labels: labels.len(),
                });
            }
            Some(labels)
        }
        None => None,
    };
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(
        Tensor::matrix(n, rows * cols, pixels)?,
        labels,
        DatasetMeta {
            name,
            width: cols,
            height: rows,
        },
    )
}
