//! MNIST IDX reader. Headers are big-endian: magic, item count, and for
//! images the row and column counts, followed by one unsigned byte per pixel
//! or label.

use std::fs;
use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_owned(),
            detail: format!("header ends at byte {}", bytes.len()),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_owned(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    let end = header + len;
    if bytes.len() < end {
        return Err(Error::Truncated {
            path: path.to_owned(),
            detail: format!("expected {end} bytes, found {}", bytes.len()),
        });
    }
    Ok(&bytes[header..end])
}

/// Images as flattened pixel vectors scaled to `[0, 1]`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    check_magic(&bytes, IDX_IMAGES_MAGIC, path)?;
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let pixels = rows * cols;
    let data = payload(&bytes, 16, count * pixels, path)?;
    Ok(data
        .chunks_exact(pixels.max(1))
        .take(count)
        .map(|img| img.iter().map(|&p| f64::from(p) / 255.0).collect())
        .collect())
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    check_magic(&bytes, IDX_LABELS_MAGIC, path)?;
    let count = be_u32(&bytes, 4, path)? as usize;
    Ok(payload(&bytes, 8, count, path)?
        .iter()
        .map(|&l| usize::from(l))
        .collect())
}

fn load_split(images: &Path, labels: &Path) -> Result<Vec<Sample>> {
    let images = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if images.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    Ok(images
        .into_iter()
        .zip(labels)
        .map(|(features, label)| Sample { features, label })
        .collect())
}

/// Returns `(train, test)`.
pub fn load_mnist(
    train_images: impl AsRef<Path>,
    train_labels: impl AsRef<Path>,
    test_images: impl AsRef<Path>,
    test_labels: impl AsRef<Path>,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train = load_split(train_images.as_ref(), train_labels.as_ref())?;
    let test = load_split(test_images.as_ref(), test_labels.as_ref())?;
    Ok((train, test))
}
