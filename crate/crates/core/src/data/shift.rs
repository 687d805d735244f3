//! Pixel-level domain shifts.

use alloc::format;
use core::str::FromStr;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ShiftKind {
    /// `p ↦ (1−a)p + a(1−p)` with `a = min(magnitude, 1)`.
    Invert,
    /// `p ↦ p + magnitude`.
    Brightness,
    /// Additive Gaussian noise with std `magnitude`.
    Noise,
    /// Grayscale max filter of radius `round(magnitude)`.
    Dilate,
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "invert" => Ok(Self::Invert),
            "brightness" => Ok(Self::Brightness),
            "noise" => Ok(Self::Noise),
            "dilate" => Ok(Self::Dilate),
            other => Err(Error::Invalid(format!("unknown shift kind `{other}`"))),
        }
    }
}

/// Applies `kind` to every image and clamps back to `[0, 1]`. Labels, domain
/// and semantics are carried over unchanged.
pub fn domain_shift(set: &LabeledImageSet, kind: ShiftKind, magnitude: f64, seed: u64) -> Result<LabeledImageSet> {
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(Error::Invalid(format!("shift magnitude must be >= 0, got {magnitude}")));
    }
    let mut out = set.clone();
    match kind {
        ShiftKind::Invert => {
            let a = magnitude.min(1.0);
            out.images.iter_mut().for_each(|p| *p = (1.0 - a) * *p + a * (1.0 - *p));
        }
        ShiftKind::Brightness => out.images.iter_mut().for_each(|p| *p += magnitude),
        ShiftKind::Noise => {
            if magnitude > 0.0 {
                let px = set.pixels();
                for (i, img) in out.images.chunks_mut(px).enumerate() {
                    let mut r = rng::stream(seed, Purpose::Shift, i as u64, 0);
                    img.iter_mut().for_each(|p| *p += rng::normal(&mut r, magnitude));
                }
            }
        }
        ShiftKind::Dilate => {
            let rad = libm::round(magnitude) as usize;
            if rad > 0 {
                let (h, w) = (set.rows, set.cols);
                for (i, img) in out.images.chunks_mut(h * w).enumerate() {
                    let src = set.image(i);
                    dilate(src, img, h, w, rad);
                }
            }
        }
    }
    out.images.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    Ok(out)
}

fn dilate(src: &[f64], dst: &mut [f64], h: usize, w: usize, rad: usize) {
    for r in 0..h {
        for c in 0..w {
            let mut m = 0.0f64;
            for rr in r.saturating_sub(rad)..(r + rad + 1).min(h) {
                for cc in c.saturating_sub(rad)..(c + rad + 1).min(w) {
                    m = m.max(src[rr * w + cc]);
                }
            }
            dst[r * w + c] = m;
        }
    }
}
