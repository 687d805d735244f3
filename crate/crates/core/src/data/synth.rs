//! Procedural compositional images: each object is a grid of part slots, and
//! each slot shows a glyph drawn from that slot's mixture over part types.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::heads::SemanticSet;
use crate::rng::{self, Purpose};

/// Number of distinct procedural glyphs.
pub const GLYPH_COUNT: usize = 12;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SynthSpec {
    pub side: usize,
    pub classes: usize,
    /// Part slots per object.
    pub parts: usize,
    /// Part-type vocabulary size.
    pub part_types: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    /// Per class, `parts·part_types` mixture weights (slot-major). Generated as
    /// distinct one-hot compositions when absent.
    pub compositions: Option<Vec<Vec<f64>>>,
    pub samples_per_class: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    /// Std of additive Gaussian pixel noise.
    pub noise: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    /// Maximum stamp offset, in pixels, inside its slot.
    pub jitter: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(side: usize, classes: usize, parts: usize, part_types: usize, samples_per_class: usize) -> Self {
        Self {
            side,
            classes,
            parts,
            part_types,
            compositions: None,
            samples_per_class,
            noise: 0.0,
            jitter: 1,
            seed: 0,
        }
    }

    /// Side of the square slot grid.
    pub fn grid(&self) -> usize {
        let mut g = 1;
        while g * g < self.parts {
            g += 1;
        }
        g
    }

    /// Stamp side; slots are `side / grid` wide and keep `jitter` pixels of
    /// margin on each side.
    pub fn stamp_side(&self) -> Option<usize> {
        let cell = self.side / self.grid();
        cell.checked_sub(2 * self.jitter).filter(|&s| s >= 3)
    }

    /// Top-left corner and extent of slot `s`'s region.
    pub fn slot_region(&self, slot: usize) -> (usize, usize, usize) {
        let g = self.grid();
        let cell = self.side / g;
        ((slot / g) * cell, (slot % g) * cell, cell)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.parts == 0 || self.part_types == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("classes, parts, part_types and samples_per_class must be >= 1".into()));
        }
        if self.part_types > GLYPH_COUNT {
            return Err(Error::Config(format!("part_types must be <= {GLYPH_COUNT}")));
        }
        if self.stamp_side().is_none() {
            return Err(Error::Config(format!(
                "canvas {} too small for {} non-overlapping stamps with jitter {}",
                self.side, self.parts, self.jitter
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::Config("noise must be >= 0".into()));
        }
        if let Some(cs) = &self.compositions {
            check_compositions(cs, self.classes, self.parts, self.part_types)?;
        } else {
            let combos = libm::pow(self.part_types as f64, self.parts as f64);
            if combos < self.classes as f64 {
                return Err(Error::Config(format!(
                    "{} classes need distinct compositions but only {combos} exist",
                    self.classes
                )));
            }
        }
        Ok(())
    }
}

fn check_compositions(cs: &[Vec<f64>], classes: usize, parts: usize, types: usize) -> Result<()> {
    if cs.len() != classes {
        return Err(Error::Config(format!("{} compositions for {classes} classes", cs.len())));
    }
    for (c, comp) in cs.iter().enumerate() {
        if comp.len() != parts * types {
            return Err(Error::Config(format!("composition {c} has {} weights, expected {}", comp.len(), parts * types)));
        }
        for slot in comp.chunks(types) {
            let sum: f64 = slot.iter().sum();
            if slot.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("composition {c}: slot weights must be >= 0 and sum to 1")));
            }
        }
    }
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            if cs[i] == cs[j] {
                return Err(Error::Config(format!("classes {i} and {j} have identical compositions")));
            }
        }
    }
    Ok(())
}

/// Distinct one-hot compositions. Each slot's part types are a shuffled,
/// balanced repetition of the vocabulary, so every type appears in every slot
/// about `classes / part_types` times. Reshuffled until all classes differ.
fn one_hot_compositions(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(spec.seed, Purpose::Composition, 0, 0);
    let (k, m, n) = (spec.part_types, spec.parts, spec.classes);
    let balanced = libm::pow(k as f64, m as f64) >= 4.0 * n as f64;
    let picks: Vec<Vec<usize>> = loop {
        let columns: Vec<Vec<usize>> = (0..m)
            .map(|_| {
                let mut col: Vec<usize> = (0..n).map(|c| c % k).collect();
                col.shuffle(&mut rng);
                col
            })
            .collect();
        let mut rows: Vec<Vec<usize>> = (0..n).map(|c| columns.iter().map(|col| col[c]).collect()).collect();
        if !balanced {
            // Few combinations: balance is abandoned for a direct distinct draw.
            rows.clear();
            while rows.len() < n {
                let cand: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
                if !rows.contains(&cand) {
                    rows.push(cand);
                }
            }
        }
        let distinct = (0..n).all(|i| (i + 1..n).all(|j| rows[i] != rows[j]));
        if distinct {
            break rows;
        }
    };
    picks
        .into_iter()
        .map(|types| {
            let mut v = vec![0.0; m * k];
            for (slot, t) in types.into_iter().enumerate() {
                v[slot * k + t] = 1.0;
            }
            v
        })
        .collect()
}

/// Glyph `kind` rasterized on an `n × n` binary grid (row-major).
pub fn glyph(kind: usize, n: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    let last = n - 1;
    let mid = n / 2;
    for r in 0..n {
        for c in 0..n {
            let on = match kind % GLYPH_COUNT {
                0 => r == mid,
                1 => c == mid,
                2 => r == c,
                3 => r + c == last,
                4 => r == mid || c == mid,
                5 => r == c || r + c == last,
                6 => r == 0 || c == 0 || r == last || c == last,
                7 => r > 0 && c > 0 && r < last && c < last && (r + c) % 2 == 0,
                8 => r == last || c == 0,
                9 => r == 0 || c == mid,
                10 => {
                    let dr = 2 * r as i64 - last as i64;
                    let dc = 2 * c as i64 - last as i64;
                    let d2 = dr * dr + dc * dc;
                    let rad = last as i64;
                    d2 <= rad * rad && d2 >= (rad - 2) * (rad - 2)
                }
                _ => r <= mid && c <= mid,
            };
            if on {
                g[r * n + c] = 1.0;
            }
        }
    }
    g
}

fn sample_type(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (t, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return t;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Renders `samples_per_class` images per class. Sample `i` of every class
/// shares its per-slot randomness and its noise with sample `i` of every other
/// class, so classes that agree on a slot render it identically.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<LabeledImageSet> {
    spec.validate()?;
    let comps = spec.compositions.clone().unwrap_or_else(|| one_hot_compositions(spec));
    let stamp = spec.stamp_side().expect("validated");
    let glyphs: Vec<Vec<f64>> = (0..spec.part_types).map(|k| glyph(k, stamp)).collect();
    let side = spec.side;
    let n = spec.classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        for i in 0..spec.samples_per_class {
            let mut img = vec![0.0; side * side];
            for slot in 0..spec.parts {
                let mut r = rng::stream(spec.seed, Purpose::Synth, i as u64, slot as u64);
                let u: f64 = r.random();
                let dr = r.random_range(0..=2 * spec.jitter);
                let dc = r.random_range(0..=2 * spec.jitter);
                let t = sample_type(&comps[class][slot * spec.part_types..(slot + 1) * spec.part_types], u);
                let (top, left, _) = spec.slot_region(slot);
                for gr in 0..stamp {
                    for gc in 0..stamp {
                        img[(top + dr + gr) * side + left + dc + gc] = glyphs[t][gr * stamp + gc];
                    }
                }
            }
            if spec.noise > 0.0 {
                let mut r = rng::stream(spec.seed, Purpose::SynthNoise, i as u64, 0);
                for p in img.iter_mut() {
                    *p = (*p + rng::normal(&mut r, spec.noise)).clamp(0.0, 1.0);
                }
            }
            images.extend(img);
            labels.push(class);
        }
    }
    let semantics = SemanticSet::new(comps.into_iter().enumerate().collect())?;
    Ok(LabeledImageSet::new(side, side, images, labels, spec.classes)?.with_semantics(semantics))
}
