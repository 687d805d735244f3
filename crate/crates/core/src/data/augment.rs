//! Geometric resampling: rotations as new classes, nearest-neighbour resize.

use alloc::format;
use alloc::vec::Vec;

use super::LabeledImageSet;
use crate::error::{Error, Result};

/// Clockwise quarter turn of a square `n × n` image.
pub fn rotate90(img: &[f64], n: usize) -> Vec<f64> {
    let mut out = alloc::vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            out[c * n + (n - 1 - r)] = img[r * n + c];
        }
    }
    out
}

/// Appends a rotated copy of every image for each angle in `angles`
/// (degrees, each one of 90, 180, 270). The `j`-th angle's copies get labels
/// `label + (j+1)·num_classes`.
pub fn augment_rotations(set: &LabeledImageSet, angles: &[u32]) -> Result<LabeledImageSet> {
    if set.rows != set.cols {
        return Err(Error::Data(format!("rotation needs square images, got {}x{}", set.rows, set.cols)));
    }
    for (i, a) in angles.iter().enumerate() {
        if ![90, 180, 270].contains(a) {
            return Err(Error::Invalid(format!("rotation angle {a} not in {{90, 180, 270}}")));
        }
        if angles[..i].contains(a) {
            return Err(Error::Invalid(format!("rotation angle {a} repeated")));
        }
    }
    let n = set.rows;
    let mut out = set.clone();
    let base = set.num_classes;
    for (j, &a) in angles.iter().enumerate() {
        for i in 0..set.len() {
            let mut img = set.image(i).to_vec();
            for _ in 0..a / 90 {
                img = rotate90(&img, n);
            }
            out.images.extend(img);
            out.labels.push(set.labels[i] + (j + 1) * base);
        }
    }
    out.num_classes = base * (angles.len() + 1);
    out.semantics = None;
    Ok(out)
}

/// Nearest-neighbour resampling to `rows × cols`.
pub fn resize_nearest(set: &LabeledImageSet, rows: usize, cols: usize) -> Result<LabeledImageSet> {
    if rows == 0 || cols == 0 {
        return Err(Error::Invalid("target size must be >= 1".into()));
    }
    let mut images = Vec::with_capacity(set.len() * rows * cols);
    for i in 0..set.len() {
        let src = set.image(i);
        for r in 0..rows {
            let sr = r * set.rows / rows;
            for c in 0..cols {
                images.push(src[sr * set.cols + c * set.cols / cols]);
            }
        }
    }
    let mut out = set.clone();
    out.rows = rows;
    out.cols = cols;
    out.images = images;
    Ok(out)
}
