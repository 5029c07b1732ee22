//! IDX and CIFAR-10 binary readers and writers.
//!
//! Pixels are bytes scaled to `[0, 1]` by `/ 255`; writers round back.

use std::fs;
use std::path::Path;

use super::{Dataset, ImageShape, Split};
use crate::error::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

fn be_u32(bytes: &[u8], at: usize, what: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(format!("{}: truncated header", what.display())))
}

fn read_idx_header(bytes: &[u8], path: &Path, magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let got = be_u32(bytes, 0, path)?;
    if got != magic {
        return Err(Error::format(format!(
            "{}: magic {got:#010x}, expected {magic:#010x}",
            path.display()
        )));
    }
    let dims = (0..ndims)
        .map(|k| be_u32(bytes, 4 + 4 * k, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let body = bytes.len() - 4 - 4 * ndims;
    let expect: usize = dims.iter().product();
    if body != expect {
        return Err(Error::format(format!(
            "{}: dims {dims:?} need {expect} bytes, found {body}",
            path.display()
        )));
    }
    Ok(dims)
}

fn scale(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| f64::from(b) / 255.0).collect()
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a grayscale IDX image file (`[N, H, W]` bytes) and its label file.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let ib = fs::read(images)?;
    let lb = fs::read(labels)?;
    let dims = read_idx_header(&ib, images, IDX_IMAGES, 3)?;
    let ldims = read_idx_header(&lb, labels, IDX_LABELS, 1)?;
    if dims[0] != ldims[0] {
        return Err(Error::format(format!(
            "{} images but {} labels",
            dims[0], ldims[0]
        )));
    }
    let shape = ImageShape {
        channels: 1,
        height: dims[1],
        width: dims[2],
    };
    Dataset::new(
        scale(&ib[16..]),
        lb[8..].iter().map(|&l| usize::from(l)).collect(),
        shape,
        split,
    )
}

/// Writes a single-channel dataset as an IDX image/label pair.
pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let s = dataset.shape;
    if s.channels != 1 {
        return Err(Error::usage("IDX images must have one channel"));
    }
    if dataset.labels.iter().any(|&l| l > 255) {
        return Err(Error::usage("IDX labels must fit in a byte"));
    }
    let n = dataset.len() as u32;
    let mut ib = Vec::with_capacity(16 + dataset.images.len());
    for v in [IDX_IMAGES, n, s.height as u32, s.width as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(dataset.images.iter().map(|&v| quantize(v)));
    let mut lb = Vec::with_capacity(8 + dataset.len());
    lb.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lb.extend_from_slice(&n.to_be_bytes());
    lb.extend(dataset.labels.iter().map(|&l| l as u8));
    fs::write(images, ib)?;
    fs::write(labels, lb)?;
    Ok(())
}

/// Reads CIFAR-10 binary records: one label byte then 3x32x32 channel-major pixels.
pub fn load_cifar_binary(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(format!(
            "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(usize::from(rec[0]));
        images.extend(scale(&rec[1..]));
    }
    let shape = ImageShape {
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
    };
    Dataset::new(images, labels, shape, split)
}

pub fn write_cifar_binary(dataset: &Dataset, path: &Path) -> Result<()> {
    let want = ImageShape {
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
    };
    if dataset.shape != want {
        return Err(Error::usage("CIFAR records hold 3x32x32 images"));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for i in 0..dataset.len() {
        out.push(dataset.labels[i] as u8);
        out.extend(dataset.image(i).iter().map(|&v| quantize(v)));
    }
    fs::write(path, out)?;
    Ok(())
}
