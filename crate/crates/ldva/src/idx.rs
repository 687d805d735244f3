//! IDX files on disk.

use std::path::Path;

use ldva_core::data::{self, LabeledImageSet};

use crate::error::{read, write, Error, Result};

fn located(path: &Path, e: ldva_core::Error) -> Error {
    match e {
        ldva_core::Error::Format { offset, detail } => Error::format(path, format!("byte {offset}: {detail}")),
        other => other.into(),
    }
}

/// Reads an image file and its label file.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledImageSet> {
    let ib = read(images)?;
    let lb = read(labels)?;
    data::parse_idx_images(&ib).map_err(|e| located(images, e))?;
    data::parse_idx_labels(&lb).map_err(|e| located(labels, e))?;
    data::parse_idx(&ib, &lb).map_err(|e| located(images, e))
}

pub fn write_idx(set: &LabeledImageSet, images: &Path, labels: &Path) -> Result<()> {
    write(images, &data::encode_idx_images(set)?)?;
    write(labels, &data::encode_idx_labels(&set.labels)?)
}
