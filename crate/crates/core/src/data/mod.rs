//! In-memory labeled image sets and the transforms and samplers over them.

mod augment;
mod idx;
mod shift;
mod split;
mod synth;

pub use augment::{augment_rotations, resize_nearest, rotate90};
pub use idx::{encode_idx_images, encode_idx_labels, parse_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use shift::{domain_shift, ShiftKind};
pub use split::{class_split, sample_episode, sample_split, Episode};
pub use synth::{generate_synthetic, glyph, SynthSpec, GLYPH_COUNT};

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::heads::{Domain, SemanticSet};
use crate::tensor::Tensor;

/// Grayscale images in `[0, 1]`, stored row-major one after another.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    /// Size of the label space; every label is below it.
    pub num_classes: usize,
    pub domain: Option<Domain>,
    pub semantics: Option<SemanticSet>,
}

impl LabeledImageSet {
    pub fn new(rows: usize, cols: usize, images: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Data("image side must be >= 1".into()));
        }
        if images.len() != labels.len() * rows * cols {
            return Err(Error::Data(format!(
                "{} pixel values for {} images of {rows}x{cols}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(p) = images.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("pixel {p} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {l} outside {num_classes} classes")));
        }
        Ok(Self { rows, cols, images, labels, num_classes, domain: None, semantics: None })
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = Some(domain);
        self
    }

    pub fn with_semantics(mut self, semantics: SemanticSet) -> Self {
        self.semantics = Some(semantics);
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    /// `[n, 1, rows, cols]` batch of the given samples.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} out of range ({})", self.len())));
            }
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(&[indices.len(), 1, self.rows, self.cols], data)
    }

    /// Sample indices of each class, indexed by label.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = alloc::vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Labels that occur at least once, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        self.class_indices().iter().enumerate().filter(|(_, v)| !v.is_empty()).map(|(c, _)| c).collect()
    }

    /// New set holding the given samples in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain: self.domain,
            semantics: self.semantics.clone(),
        }
    }

    /// Samples of `other` appended after these. Shapes must agree.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Data("cannot concatenate sets of different image size".into()));
        }
        let mut out = self.clone();
        out.images.extend_from_slice(&other.images);
        out.labels.extend_from_slice(&other.labels);
        out.num_classes = self.num_classes.max(other.num_classes);
        Ok(out)
    }
}
