//! IDX reader for the MNIST image and label files.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ShapeBuilder};

use super::data::{Dataset, Split};
use crate::error::{LobsError, Result};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Clone, Debug)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

fn format_err(offset: usize, detail: impl Into<String>) -> LobsError {
    LobsError::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(bytes.len(), format!("truncated header, need 4 bytes at {offset}")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = read_u32(bytes, 0)?;
    if magic != expected {
        return Err(format_err(0, format!("bad magic {magic}, expected {expected}")));
    }
    Ok(())
}

/// Decodes an IDX3 image file into `(rows * cols) x count` pixels scaled to `[0, 1]`.
pub fn parse_images(bytes: &[u8]) -> Result<(Array2<f64>, usize, usize)> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let pixels = rows * cols;
    let needed = 16 + count * pixels;
    if bytes.len() < needed {
        return Err(format_err(
            bytes.len(),
            format!("truncated image data, expected {needed} bytes"),
        ));
    }
    let data: Vec<f64> = bytes[16..needed].iter().map(|&b| b as f64 / 255.0).collect();
    let images = Array2::from_shape_vec((pixels, count).f(), data).expect("idx image shape");
    Ok((images, rows, cols))
}

/// Decodes an IDX1 label file.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(format_err(
            bytes.len(),
            format!("truncated label data, expected {needed} bytes"),
        ));
    }
    Ok(bytes[8..needed].iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| LobsError::io(path, e))
}

/// Loads one split from a directory holding the four uncompressed IDX files.
pub fn load_mnist_split(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (img, lbl) = match split {
        Split::Test => (TEST_IMAGES, TEST_LABELS),
        _ => (TRAIN_IMAGES, TRAIN_LABELS),
    };
    let (images, _, _) = parse_images(&read(&dir.join(img))?)?;
    let labels = parse_labels(&read(&dir.join(lbl))?)?;
    if labels.len() != images.ncols() {
        return Err(format_err(
            4,
            format!("{} images but {} labels", images.ncols(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 9) {
        return Err(format_err(8, format!("label {bad} is not a digit")));
    }
    Dataset::new(images, labels, 10, split)
}

pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Mnist> {
    Ok(Mnist {
        train: load_mnist_split(dir.as_ref(), Split::Train)?,
        test: load_mnist_split(dir.as_ref(), Split::Test)?,
    })
}
