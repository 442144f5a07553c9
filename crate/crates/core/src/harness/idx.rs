//! IDX import (the MNIST file layout): big-endian magic, big-endian `u32`
//! dimensions, then unsigned bytes.

use std::path::Path;

use super::data::Dataset;
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("IDX header truncated at byte {at}")))
}

/// Parses an IDX body with the given magic, returning dimensions and data.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        bail!(Format, "IDX magic {found:#010x}, expected {magic:#010x}");
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    match bytes.len().checked_sub(start) {
        Some(body) if body == len => Ok((dims, &bytes[start..])),
        _ => bail!(
            Format,
            "IDX body has {} bytes, expected {len}",
            bytes.len().saturating_sub(start)
        ),
    }
}

/// Loads an image/label IDX pair. Pixels are scaled to `[0, 1]` and the
/// grey channel is repeated `channels` times.
pub fn load_idx(images: &Path, labels: &Path, channels: usize, seed: u64) -> Result<Dataset> {
    let img_bytes = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (dims, pixels) = parse_idx(&img_bytes, IMAGES_MAGIC)?;
    let (ldims, raw_labels) = parse_idx(&lbl_bytes, LABELS_MAGIC)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        bail!(Input, "{n} images but {} labels", ldims[0]);
    }
    if h != w || channels == 0 {
        bail!(
            Input,
            "expected square images and channels >= 1, got {h}x{w}, {channels}"
        );
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * channels * plane);
    for img in pixels.chunks_exact(plane) {
        for _ in 0..channels {
            data.extend(img.iter().map(|&p| p as f32 / 255.0));
        }
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let name = images.file_stem().and_then(|s| s.to_str()).unwrap_or("idx");
    Dataset::from_parts(
        name,
        seed,
        num_classes,
        Tensor::from_vec(&[n, channels, h, w], data)?,
        labels,
    )
}

/// Encodes bytes in IDX layout (used for exporting and tests).
pub fn encode_idx(magic: u32, dims: &[usize], body: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(body);
    out
}
