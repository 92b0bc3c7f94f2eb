//! Binary morphology and the pseudo ground-truth builder.
//!
//! Pseudo labels are produced without annotation: the frame is binarized by
//! intensity, opened with a structuring element to strip everything thinner
//! than the element, and reduced to its largest blobs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{connected_components, label_components, BinaryMask, Connectivity, ImageBuffer};

/// Flat structuring element with an anchor pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    anchor: (usize, usize),
}

impl StructuringElement {
    pub fn new(height: usize, width: usize, bits: Vec<bool>, anchor: (usize, usize)) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "{} bits for a {height}x{width} element",
                bits.len()
            )));
        }
        if anchor.0 >= height || anchor.1 >= width {
            return Err(Error::Parameter(format!("anchor {anchor:?} outside element")));
        }
        if !bits[anchor.0 * width + anchor.1] {
            return Err(Error::Parameter("anchor bit must be set".into()));
        }
        Ok(Self {
            height,
            width,
            bits,
            anchor,
        })
    }

    /// Full rectangle anchored at its center (rounded toward the origin).
    pub fn rect(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![true; height * width], ((height - 1) / 2, (width - 1) / 2))
            .expect("rectangle is a valid element")
    }

    pub fn disk(radius: usize) -> Self {
        let d = 2 * radius + 1;
        let r2 = (radius * radius) as isize;
        let mut bits = Vec::with_capacity(d * d);
        for r in 0..d as isize {
            for c in 0..d as isize {
                let (dy, dx) = (r - radius as isize, c - radius as isize);
                bits.push(dy * dy + dx * dx <= r2);
            }
        }
        Self::new(d, d, bits, (radius, radius)).expect("disk is a valid element")
    }

    /// Point reflection through the anchor.
    pub fn reflect(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().rev().copied().collect(),
            anchor: (self.height - 1 - self.anchor.0, self.width - 1 - self.anchor.1),
        }
    }

    /// Offsets of the set bits relative to the anchor.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.bits[r * self.width + c] {
                    out.push((
                        r as isize - self.anchor.0 as isize,
                        c as isize - self.anchor.1 as isize,
                    ));
                }
            }
        }
        out
    }

    /// Largest absolute offset along either axis.
    pub fn reach(&self) -> usize {
        self.offsets()
            .iter()
            .map(|&(r, c)| r.unsigned_abs().max(c.unsigned_abs()))
            .max()
            .unwrap_or(0)
    }
}

#[inline]
fn sample(m: &BinaryMask, r: isize, c: isize, pad: bool) -> bool {
    if r < 0 || c < 0 || r >= m.height() as isize || c >= m.width() as isize {
        pad
    } else {
        m.get(r as usize, c as usize)
    }
}

/// True at `z` iff the element anchored at `z` lies inside `m`; the frame
/// outside the mask counts as background.
pub fn erode(m: &BinaryMask, s: &StructuringElement) -> BinaryMask {
    let offsets = s.offsets();
    BinaryMask::from_fn(m.height(), m.width(), |r, c| {
        offsets
            .iter()
            .all(|&(dr, dc)| sample(m, r as isize + dr, c as isize + dc, false))
    })
}

/// True at `z` iff the reflected element anchored at `z` meets `m`.
pub fn dilate(m: &BinaryMask, s: &StructuringElement) -> BinaryMask {
    dilate_padded(m, s, false)
}

fn dilate_padded(m: &BinaryMask, s: &StructuringElement, pad: bool) -> BinaryMask {
    let offsets = s.offsets();
    BinaryMask::from_fn(m.height(), m.width(), |r, c| {
        offsets
            .iter()
            .any(|&(dr, dc)| sample(m, r as isize - dr, c as isize - dc, pad))
    })
}

pub fn open(m: &BinaryMask, s: &StructuringElement) -> BinaryMask {
    dilate(&erode(m, s), s)
}

pub fn close(m: &BinaryMask, s: &StructuringElement) -> BinaryMask {
    erode(&dilate(m, s), s)
}

/// Embeds `m` in a frame `margin` pixels larger on every side.
pub fn pad_mask(m: &BinaryMask, margin: usize) -> BinaryMask {
    BinaryMask::from_fn(m.height() + 2 * margin, m.width() + 2 * margin, |r, c| {
        r >= margin
            && c >= margin
            && r < m.height() + margin
            && c < m.width() + margin
            && m.get(r - margin, c - margin)
    })
}

/// Sets every background pixel not 4-connected to the frame border.
pub fn fill_holes(m: &BinaryMask) -> BinaryMask {
    let (h, w) = m.shape();
    let bits = m.bits();
    let (labels, sizes) = label_components(h, w, |i| !bits[i], |_, _| true, Connectivity::Four);
    let mut touches = vec![false; sizes.len()];
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r == h - 1 || c == w - 1 {
                let l = labels[r * w + c];
                if l != u32::MAX {
                    touches[l as usize] = true;
                }
            }
        }
    }
    BinaryMask::from_fn(h, w, |r, c| {
        let l = labels[r * w + c];
        l == u32::MAX || !touches[l as usize]
    })
}

/// Otsu's threshold over a 256-bin histogram of `[0,1]` values. Returns
/// `None` when fewer than two bins are occupied.
pub fn otsu_threshold(values: &[f32]) -> Option<f32> {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    if hist.iter().filter(|&&n| n > 0).count() < 2 {
        return None;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0usize);
    for (i, &n) in hist.iter().enumerate().take(255) {
        w0 += n as f64;
        sum0 += i as f64 * n as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    // values strictly above the returned level form the bright class
    Some((best_bin as f32 + 0.5) / 255.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Binarizer {
    Otsu,
    Fixed { threshold: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoGtConfig {
    pub binarizer: Binarizer,
    /// Radius of the disk used for opening.
    pub element_radius: usize,
    /// Largest components retained after opening.
    pub keep_components: usize,
    pub fill_holes: bool,
    /// If the bright class covers more than this fraction of the frame the
    /// dark class is taken as foreground instead.
    pub invert_above: f64,
}

impl Default for PseudoGtConfig {
    fn default() -> Self {
        Self {
            binarizer: Binarizer::Otsu,
            element_radius: 5,
            keep_components: 2,
            fill_holes: true,
            invert_above: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoGt {
    pub mask: BinaryMask,
    pub threshold: Option<f32>,
    /// Set when the binarizer could not separate two classes.
    pub degenerate: bool,
}

pub fn build_pseudo_gt(img: &ImageBuffer, cfg: &PseudoGtConfig) -> Result<PseudoGt> {
    if cfg.keep_components == 0 {
        return Err(Error::Parameter("keep_components must be ≥ 1".into()));
    }
    let gray = img.to_gray();
    let (h, w) = gray.shape();
    let threshold = match cfg.binarizer {
        Binarizer::Otsu => otsu_threshold(gray.data()),
        Binarizer::Fixed { threshold } => Some(threshold),
    };
    let Some(threshold) = threshold else {
        log::warn!("{}: constant image, pseudo ground truth is empty", img.source_id);
        return Ok(PseudoGt {
            mask: BinaryMask::empty(h, w),
            threshold: None,
            degenerate: true,
        });
    };
    let mut mask = BinaryMask::new(h, w, gray.data().iter().map(|&v| v > threshold).collect())?;
    if mask.count() as f64 > cfg.invert_above * (h * w) as f64 {
        mask = mask.not();
    }
    let opened = open(&mask, &StructuringElement::disk(cfg.element_radius));
    let mut kept = BinaryMask::empty(h, w);
    for comp in connected_components(&opened, Connectivity::Eight)
        .into_iter()
        .take(cfg.keep_components)
    {
        kept = kept.or(&comp.mask)?;
    }
    if cfg.fill_holes {
        kept = fill_holes(&kept);
    }
    Ok(PseudoGt {
        mask: kept,
        threshold: Some(threshold),
        degenerate: false,
    })
}
