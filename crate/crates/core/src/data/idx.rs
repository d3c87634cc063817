//! IDX (MNIST) files: big-endian magic `0x00000803` (u8 images) or
//! `0x00000801` (u8 labels), one big-endian u32 per dimension, raw bytes.
//! Gzip-compressed files are detected by their magic bytes.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length every loaded image is zero-padded to.
pub const PAD_TO: usize = 32;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset,
            msg: "truncated header".into(),
        })
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad image magic {magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated pixel data: {} of {need} bytes", body.len()),
        });
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad label magic {magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated labels: {} of {n} bytes", body.len()),
        });
    }
    Ok(&body[..n])
}

/// Loads an IDX image/label pair, scales pixels by 1/255 and zero-pads
/// each image (centered) to `PAD_TO x PAD_TO`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images.as_ref())?;
    let lab_bytes = read_maybe_gz(labels.as_ref())?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let labs = parse_idx_labels(&lab_bytes)?;
    if labs.len() != n {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("{n} images but {} labels", labs.len()),
        });
    }
    if rows > PAD_TO || cols > PAD_TO {
        return Err(Error::config(format!("{rows}x{cols} images exceed the {PAD_TO}x{PAD_TO} geometry")));
    }
    let (top, left) = ((PAD_TO - rows) / 2, (PAD_TO - cols) / 2);
    let mut data = vec![0.0f32; n * PAD_TO * PAD_TO];
    for (i, img) in pixels.chunks_exact(rows * cols).enumerate() {
        let dst = &mut data[i * PAD_TO * PAD_TO..(i + 1) * PAD_TO * PAD_TO];
        for r in 0..rows {
            for c in 0..cols {
                dst[(top + r) * PAD_TO + left + c] = img[r * cols + c] as f32 / 255.0;
            }
        }
    }
    let labels: Vec<usize> = labs.iter().map(|&b| b as usize).collect();
    let k = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    let name = images
        .as_ref()
        .file_name()
        .and_then(|s| s.to_str())
        .map_or("idx".to_string(), |s| s.split('-').next().unwrap_or(s).to_string());
    Dataset::new(name, Tensor::new(vec![n, 1, PAD_TO, PAD_TO], data)?, labels, k)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols);
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.extend_from_slice(pixels);
    write_maybe_gz(path.as_ref(), &bytes)
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    for v in [LABELS_MAGIC, labels.len() as u32] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.extend_from_slice(labels);
    write_maybe_gz(path.as_ref(), &bytes)
}
