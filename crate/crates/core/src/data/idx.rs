//! IDX byte format: big-endian magic, big-endian u32 dims, then raw u8 data.

use alloc::format;
use alloc::vec::Vec;

use super::LabeledImageSet;
use crate::error::{Error, Result};

/// Unsigned-byte data, three dimensions.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte data, one dimension.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn fmt_err(offset: usize, detail: impl Into<alloc::string::String>) -> Error {
    Error::Format { offset, detail: detail.into() }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let b = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| fmt_err(bytes.len(), format!("truncated header, needed 4 bytes at {offset}")))?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn header(bytes: &[u8], magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let m = read_u32(bytes, 0)?;
    if m != magic {
        return Err(fmt_err(0, format!("bad magic 0x{m:08x}, expected 0x{magic:08x}")));
    }
    let dims = (0..ndims).map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let len = dims.iter().product::<usize>();
    if bytes.len() < start + len {
        return Err(fmt_err(bytes.len(), format!("truncated data, expected {} bytes", start + len)));
    }
    if bytes.len() > start + len {
        return Err(fmt_err(start + len, "trailing bytes after data"));
    }
    Ok(dims)
}

/// Returns `(rows, cols, pixels)` with pixel bytes scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let dims = header(bytes, IDX_IMAGES_MAGIC, 3)?;
    let px = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((dims[1], dims[2], px))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    header(bytes, IDX_LABELS_MAGIC, 1)?;
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Image and label files as one set. `num_classes` is one past the largest label.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledImageSet> {
    let (rows, cols, px) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    let count = read_u32(images, 4)? as usize;
    if count != labels.len() {
        return Err(fmt_err(4, format!("{count} images but {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    LabeledImageSet::new(rows, cols, px, labels, classes)
}

/// Pixels are quantized as `round(255 p)`.
pub fn encode_idx_images(set: &LabeledImageSet) -> Result<Vec<u8>> {
    let n = u32::try_from(set.len()).map_err(|_| Error::Invalid("too many images for IDX".into()))?;
    let mut out = Vec::with_capacity(16 + set.images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&n.to_be_bytes());
    out.extend_from_slice(&(set.rows as u32).to_be_bytes());
    out.extend_from_slice(&(set.cols as u32).to_be_bytes());
    out.extend(set.images.iter().map(|p| libm::round(p * 255.0) as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let n = u32::try_from(labels.len()).map_err(|_| Error::Invalid("too many labels for IDX".into()))?;
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&n.to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::Invalid(format!("label {l} does not fit in a byte")))?);
    }
    Ok(out)
}
