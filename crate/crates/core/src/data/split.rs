//! Seeded class/sample partitions and episodic sampling.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, Rng};

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("split fraction must lie in (0, 1), got {f}")))
    }
}

/// Puts `round(seen_fraction · classes)` whole classes in the first part and the
/// rest in the second. Returns the two sets and the first part's classes.
pub fn class_split(set: &LabeledImageSet, seen_fraction: f64, seed: u64) -> Result<(LabeledImageSet, LabeledImageSet, Vec<usize>)> {
    check_fraction(seen_fraction)?;
    let mut classes = set.present_classes();
    let n_seen = libm::round(seen_fraction * classes.len() as f64) as usize;
    if n_seen == 0 || n_seen >= classes.len() {
        return Err(Error::Invalid(format!(
            "fraction {seen_fraction} of {} classes leaves one side empty",
            classes.len()
        )));
    }
    let mut r = rng::stream(seed, Purpose::Split, 0, 0);
    classes.shuffle(&mut r);
    let mut seen = classes[..n_seen].to_vec();
    seen.sort_unstable();
    let (a, b): (Vec<usize>, Vec<usize>) = (0..set.len()).partition(|&i| seen.binary_search(&set.labels[i]).is_ok());
    Ok((set.subset(&a), set.subset(&b), seen))
}

/// Stratified sample split: within each class, `round(fraction · n_class)`
/// samples go to the first part.
pub fn sample_split(set: &LabeledImageSet, fraction: f64, seed: u64) -> Result<(LabeledImageSet, LabeledImageSet)> {
    check_fraction(fraction)?;
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (c, mut idx) in set.class_indices().into_iter().enumerate() {
        let mut r = rng::stream(seed, Purpose::Split, 1, c as u64);
        idx.shuffle(&mut r);
        let k = libm::round(fraction * idx.len() as f64) as usize;
        first.extend_from_slice(&idx[..k]);
        second.extend_from_slice(&idx[k..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    if first.is_empty() || second.is_empty() {
        return Err(Error::Invalid(format!("fraction {fraction} leaves one side empty")));
    }
    Ok((set.subset(&first), set.subset(&second)))
}

/// Indices into the source set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    /// `k` samples per class, class-major.
    pub support: Vec<usize>,
    /// `q` samples per class, class-major.
    pub query: Vec<usize>,
}

/// Draws `m` classes without replacement, then `k + q` samples of each without
/// replacement; the first `k` become support.
pub fn sample_episode(set: &LabeledImageSet, m: usize, k: usize, q: usize, rng: &mut Rng) -> Result<Episode> {
    let by_class = set.class_indices();
    let mut eligible: Vec<usize> = (0..by_class.len()).filter(|&c| by_class[c].len() >= k + q).collect();
    if m == 0 || eligible.len() < m {
        return Err(Error::Invalid(format!(
            "{m}-way episode needs {m} classes with >= {} samples, found {}",
            k + q,
            eligible.len()
        )));
    }
    let (picked, _) = eligible.partial_shuffle(rng, m);
    let classes = picked.to_vec();
    let mut support = Vec::with_capacity(m * k);
    let mut query = Vec::with_capacity(m * q);
    for &c in &classes {
        let mut pool = by_class[c].clone();
        let (draw, _) = pool.partial_shuffle(rng, k + q);
        support.extend_from_slice(&draw[..k]);
        query.extend_from_slice(&draw[k..]);
    }
    Ok(Episode { classes, support, query })
}
