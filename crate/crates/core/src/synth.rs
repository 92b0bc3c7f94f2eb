//! Synthetic blade scenes with exact masks, used in place of survey imagery.
//!
//! A scene is a sky-to-ground gradient with low-frequency texture, one bright
//! rotated rectangle (the blade) rendered with 4×4 supersampled coverage, an
//! optional surface defect, and additive Gaussian noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ColorSpace, ImageBuffer};
use crate::ingest::{stream_rng, DatasetIndex, DefectRecord};
use crate::io;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Blob,
    Scratch,
    EdgeErosion,
}

impl DefectKind {
    pub fn name(self) -> &'static str {
        match self {
            DefectKind::Blob => "blob",
            DefectKind::Scratch => "scratch",
            DefectKind::EdgeErosion => "edge_erosion",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// `(height, width)`
    pub image_size: (usize, usize),
    pub n_images: usize,
    pub n_negatives: usize,
    /// Blade width range in pixels, `[min, max)`.
    pub blade_width_range: (f64, f64),
    pub defect_kinds: Vec<DefectKind>,
    pub defect_rate: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            n_images: 40,
            n_negatives: 10,
            blade_width_range: (12.0, 20.0),
            defect_kinds: vec![DefectKind::Blob, DefectKind::Scratch, DefectKind::EdgeErosion],
            defect_rate: 0.3,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (lo, hi) = self.blade_width_range;
        if h < 8 || w < 8 {
            return Err(Error::Config(format!("image_size {h}x{w} too small")));
        }
        if !(lo > 0.0 && lo <= hi && hi < h.min(w) as f64) {
            return Err(Error::Config(format!(
                "blade_width_range ({lo}, {hi}) must be positive, ordered and below {}",
                h.min(w)
            )));
        }
        if !(0.0..=1.0).contains(&self.defect_rate) {
            return Err(Error::Config(format!("defect_rate {} not a probability", self.defect_rate)));
        }
        if self.defect_rate > 0.0 && self.defect_kinds.is_empty() {
            return Err(Error::Config("defect_rate > 0 with no defect kinds".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Geometry and shade of one blade.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blade {
    /// `(row, col)` of the rectangle center.
    pub center: (f64, f64),
    /// Orientation of the long axis, radians.
    pub angle: f64,
    pub length: f64,
    pub width: f64,
    pub shade: [f64; 3],
}

impl Blade {
    pub fn random(rng: &mut ChaCha8Rng, size: (usize, usize), width_range: (f64, f64)) -> Self {
        let (h, w) = (size.0 as f64, size.1 as f64);
        let width = if width_range.1 > width_range.0 {
            rng.random_range(width_range.0..width_range.1)
        } else {
            width_range.0
        };
        let grey = rng.random_range(0.80..0.92);
        Blade {
            center: (rng.random_range(0.35..0.65) * h, rng.random_range(0.35..0.65) * w),
            angle: rng.random_range(0.0..PI),
            length: rng.random_range(0.7..1.2) * h.max(w),
            width,
            shade: [grey, grey + rng.random_range(-0.02..0.02), grey + rng.random_range(0.0..0.04)],
        }
    }

    /// Long-axis and cross-axis coordinates of point `(y, x)`.
    fn local(&self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let (s, c) = self.angle.sin_cos();
        (dx * c + dy * s, -dx * s + dy * c)
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (u, v) = self.local(y, x);
        u.abs() <= self.length / 2.0 && v.abs() <= self.width / 2.0
    }
}

/// Fraction of a pixel's 4×4 subsamples satisfying `inside`.
fn coverage(row: usize, col: usize, inside: impl Fn(f64, f64) -> bool) -> f64 {
    let mut n = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let y = row as f64 + (sy as f64 + 0.5) / 4.0;
            let x = col as f64 + (sx as f64 + 0.5) / 4.0;
            n += inside(y, x) as u32;
        }
    }
    n as f64 / 16.0
}

struct Background {
    top: [f64; 3],
    bottom: [f64; 3],
    waves: [(f64, f64, f64, f64); 2],
}

impl Background {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let top = [
            rng.random_range(0.35..0.50),
            rng.random_range(0.45..0.58),
            rng.random_range(0.55..0.68),
        ];
        let bottom = [
            rng.random_range(0.12..0.28),
            rng.random_range(0.18..0.33),
            rng.random_range(0.20..0.38),
        ];
        let mut wave = || {
            (
                rng.random_range(0.02..0.05),
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..2.0 * PI),
            )
        };
        let waves = [wave(), wave()];
        Self { top, bottom, waves }
    }

    fn color(&self, row: usize, col: usize, size: (usize, usize)) -> [f64; 3] {
        let t = row as f64 / (size.0.max(2) - 1) as f64;
        let (ny, nx) = (row as f64 / size.0 as f64, col as f64 / size.1 as f64);
        let texture: f64 = self
            .waves
            .iter()
            .map(|&(amp, fy, fx, phase)| amp * (2.0 * PI * (fy * ny + fx * nx) + phase).sin())
            .sum();
        [0, 1, 2].map(|c| self.top[c] * (1.0 - t) + self.bottom[c] * t + texture)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Defect {
    pub kind: DefectKind,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub id: String,
    pub image: ImageBuffer,
    pub blade_mask: BinaryMask,
    pub defects: Vec<Defect>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub scenes: Vec<SynthScene>,
    pub negatives: Vec<ImageBuffer>,
}

/// Linear-light RGB canvas before noise and quantization.
struct Canvas {
    size: (usize, usize),
    px: Vec<[f64; 3]>,
    background: Background,
}

impl Canvas {
    fn new(size: (usize, usize), rng: &mut ChaCha8Rng) -> Self {
        let background = Background::random(rng);
        let mut px = Vec::with_capacity(size.0 * size.1);
        for r in 0..size.0 {
            for c in 0..size.1 {
                px.push(background.color(r, c, size));
            }
        }
        Self { size, px, background }
    }

    fn blend(&mut self, row: usize, col: usize, color: [f64; 3], alpha: f64) {
        let p = &mut self.px[row * self.size.1 + col];
        for c in 0..3 {
            p[c] = p[c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    /// Paints a blade and returns its mask (coverage ≥ ½).
    fn draw_blade(&mut self, blade: &Blade) -> BinaryMask {
        let (h, w) = self.size;
        let mut mask = BinaryMask::empty(h, w);
        for r in 0..h {
            for c in 0..w {
                let cov = coverage(r, c, |y, x| blade.contains(y, x));
                if cov == 0.0 {
                    continue;
                }
                let (u, _) = blade.local(r as f64 + 0.5, c as f64 + 0.5);
                let shading = 0.04 * (u / blade.length.max(1.0));
                self.blend(r, c, blade.shade.map(|v| v + shading), cov);
                mask.set(r, c, cov >= 0.5);
            }
        }
        mask
    }

    /// Paints `color` where `inside` holds and the blade mask is set; returns
    /// the defect mask.
    fn stamp(
        &mut self,
        blade_mask: &BinaryMask,
        color: impl Fn(usize, usize) -> [f64; 3],
        inside: impl Fn(f64, f64) -> bool,
    ) -> BinaryMask {
        let (h, w) = self.size;
        let mut mask = BinaryMask::empty(h, w);
        for r in 0..h {
            for c in 0..w {
                if !blade_mask.get(r, c) {
                    continue;
                }
                let cov = coverage(r, c, &inside);
                if cov > 0.0 {
                    self.blend(r, c, color(r, c), cov);
                    mask.set(r, c, cov >= 0.5);
                }
            }
        }
        mask
    }

    fn finish(self, noise_sigma: f64, rng: &mut ChaCha8Rng, id: String) -> ImageBuffer {
        let normal = Normal::new(0.0, noise_sigma.max(1e-12)).expect("valid sigma");
        let data = self
            .px
            .iter()
            .flat_map(|p| *p)
            .map(|v| {
                let n = if noise_sigma > 0.0 { normal.sample(rng) } else { 0.0 };
                (v + n).clamp(0.0, 1.0) as f32
            })
            .collect();
        ImageBuffer::new(self.size.0, self.size.1, ColorSpace::Srgb, data)
            .expect("canvas size matches")
            .with_source(id)
    }
}

/// Blade pixels at least `margin` pixels (Chebyshev) away from the blade edge
/// and the frame.
fn interior_pixels(mask: &BinaryMask, margin: usize) -> Vec<(usize, usize)> {
    let (h, w) = mask.shape();
    let m = margin as isize;
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let ok = (-m..=m).all(|dr| {
                (-m..=m).all(|dc| {
                    let (y, x) = (r as isize + dr, c as isize + dc);
                    y >= 0 && x >= 0 && y < h as isize && x < w as isize && mask.get(y as usize, x as usize)
                })
            });
            if ok {
                out.push((r, c));
            }
        }
    }
    out
}

/// Blade pixels 4-adjacent to in-frame background.
fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = mask.shape();
    let mut out = Vec::new();
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            if mask.get(r, c)
                && (!mask.get(r - 1, c) || !mask.get(r + 1, c) || !mask.get(r, c - 1) || !mask.get(r, c + 1))
            {
                out.push((r, c));
            }
        }
    }
    out
}

fn add_defect(
    canvas: &mut Canvas,
    blade: &Blade,
    blade_mask: &BinaryMask,
    kind: DefectKind,
    rng: &mut ChaCha8Rng,
) -> Option<Defect> {
    let size = canvas.size;
    let mask = match kind {
        DefectKind::Blob => {
            let ra = rng.random_range(0.18..0.30) * blade.width + 1.0;
            let rb = rng.random_range(0.6..1.0) * ra;
            let candidates = interior_pixels(blade_mask, ra.ceil() as usize);
            let &(cy, cx) = candidates.get(rng.random_range(0..candidates.len().max(1)))?;
            let (cy, cx) = (cy as f64 + 0.5, cx as f64 + 0.5);
            let theta = rng.random_range(0.0..PI);
            let (s, c) = theta.sin_cos();
            let tone = rng.random_range(0.25..0.40);
            let color = [tone + 0.06, tone, tone - 0.04];
            canvas.stamp(blade_mask, |_, _| color, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                (u / ra).powi(2) + (v / rb).powi(2) <= 1.0
            })
        }
        DefectKind::Scratch => {
            let half = rng.random_range(0.4..0.8) * blade.width;
            let candidates = interior_pixels(blade_mask, 2);
            let &(cy, cx) = candidates.get(rng.random_range(0..candidates.len().max(1)))?;
            let (cy, cx) = (cy as f64 + 0.5, cx as f64 + 0.5);
            let theta = blade.angle + rng.random_range(-0.6..0.6);
            let (s, c) = theta.sin_cos();
            let tone = rng.random_range(0.20..0.35);
            canvas.stamp(blade_mask, |_, _| [tone; 3], |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                u.abs() <= half && v.abs() <= 0.9
            })
        }
        DefectKind::EdgeErosion => {
            let radius = rng.random_range(0.25..0.40) * blade.width + 1.0;
            let candidates = boundary_pixels(blade_mask);
            let &(cy, cx) = candidates.get(rng.random_range(0..candidates.len().max(1)))?;
            let (cy, cx) = (cy as f64 + 0.5, cx as f64 + 0.5);
            let background = &canvas.background;
            let colors: Vec<[f64; 3]> = (0..size.0 * size.1)
                .map(|i| background.color(i / size.1, i % size.1, size))
                .collect();
            canvas.stamp(blade_mask, |r, c| colors[r * size.1 + c], |y, x| {
                (y - cy).powi(2) + (x - cx).powi(2) <= radius * radius
            })
        }
    };
    if mask.is_empty() {
        return None;
    }
    Some(Defect { kind, mask })
}

/// Renders blades over one background and returns the image and the union
/// of blade masks. Exposed for composing multi-blade fixtures.
pub fn render_blades(
    size: (usize, usize),
    blades: &[Blade],
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
    id: impl Into<String>,
) -> (ImageBuffer, BinaryMask) {
    let mut canvas = Canvas::new(size, rng);
    let mut union = BinaryMask::empty(size.0, size.1);
    for blade in blades {
        union = union.or(&canvas.draw_blade(blade)).expect("same frame");
    }
    (canvas.finish(noise_sigma, rng, id.into()), union)
}

fn render_scene(cfg: &SynthConfig, index: usize) -> SynthScene {
    let mut rng = stream_rng(cfg.seed, index as u64);
    let id = format!("scene_{index:04}");
    let mut canvas = Canvas::new(cfg.image_size, &mut rng);
    let blade = Blade::random(&mut rng, cfg.image_size, cfg.blade_width_range);
    let blade_mask = canvas.draw_blade(&blade);
    let mut defects = Vec::new();
    if cfg.defect_rate > 0.0 && rng.random_bool(cfg.defect_rate) {
        let kind = cfg.defect_kinds[rng.random_range(0..cfg.defect_kinds.len())];
        if let Some(d) = add_defect(&mut canvas, &blade, &blade_mask, kind, &mut rng) {
            defects.push(d);
        }
    }
    let image = canvas.finish(cfg.noise_sigma, &mut rng, id.clone());
    SynthScene {
        id,
        image,
        blade_mask,
        defects,
    }
}

fn render_negative(cfg: &SynthConfig, index: usize) -> ImageBuffer {
    let mut rng = stream_rng(cfg.seed, (1 << 32) | index as u64);
    let canvas = Canvas::new(cfg.image_size, &mut rng);
    canvas.finish(cfg.noise_sigma, &mut rng, format!("neg_{index:04}"))
}

/// Renders every scene and negative. Each image draws from its own stream of
/// the master seed, so output does not depend on scheduling.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let scenes = (0..cfg.n_images).into_par_iter().map(|i| render_scene(cfg, i)).collect();
    let negatives = (0..cfg.n_negatives).into_par_iter().map(|i| render_negative(cfg, i)).collect();
    Ok(SynthDataset { scenes, negatives })
}

/// Writes `positives/`, `negatives/`, `masks/`, `defects/` and `index.json`.
pub fn write_dataset(root: &Path, data: &SynthDataset, split_seed: u64) -> Result<DatasetIndex> {
    let mut idx = DatasetIndex {
        split_seed,
        ..Default::default()
    };
    for scene in &data.scenes {
        let img = format!("positives/{}.png", scene.id);
        let mask = format!("masks/{}.png", scene.id);
        io::write_image_png(&root.join(&img), &scene.image)?;
        io::write_mask_png(&root.join(&mask), &scene.blade_mask)?;
        let mut records = Vec::new();
        for (k, d) in scene.defects.iter().enumerate() {
            let rel = format!("defects/{}_d{k}_{}.png", scene.id, d.kind.name());
            io::write_mask_png(&root.join(&rel), &d.mask)?;
            records.push(DefectRecord { kind: d.kind, mask: rel });
        }
        idx.positives.push(img.clone());
        idx.annotations.insert(img.clone(), mask);
        idx.defects.insert(img, records);
    }
    for neg in &data.negatives {
        let rel = format!("negatives/{}.png", neg.source_id);
        io::write_image_png(&root.join(&rel), neg)?;
        idx.negatives.push(rel);
    }
    idx.save(root)?;
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_images: 12,
            n_negatives: 3,
            defect_rate: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn no_defects_when_rate_zero() {
        let cfg = SynthConfig { defect_rate: 0.0, n_images: 8, ..Default::default() };
        let data = synth_generate(&cfg).unwrap();
        assert!(data.scenes.iter().all(|s| s.defects.is_empty()));
    }

    #[test]
    fn empty_config_gives_empty_dataset() {
        let cfg = SynthConfig { n_images: 0, n_negatives: 0, ..Default::default() };
        let data = synth_generate(&cfg).unwrap();
        assert!(data.scenes.is_empty() && data.negatives.is_empty());
    }

    #[test]
    fn defects_lie_inside_blades() {
        let data = synth_generate(&small()).unwrap();
        let mut kinds = std::collections::BTreeSet::new();
        for scene in &data.scenes {
            assert!(!scene.blade_mask.is_empty());
            for d in &scene.defects {
                assert!(d.mask.is_subset_of(&scene.blade_mask));
                kinds.insert(d.kind);
            }
        }
        assert!(kinds.len() >= 2, "{kinds:?}");
    }

    #[test]
    fn blades_are_brighter_than_background() {
        let data = synth_generate(&small()).unwrap();
        for scene in &data.scenes {
            let gray = scene.image.to_gray();
            let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0, 0.0, 0);
            for (i, &v) in gray.data().iter().enumerate() {
                if scene.blade_mask.bits()[i] {
                    fg += v as f64;
                    nf += 1;
                } else {
                    bg += v as f64;
                    nb += 1;
                }
            }
            assert!(fg / nf as f64 > bg / nb as f64 + 0.3);
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = SynthConfig::default();
        cfg.blade_width_range = (10.0, 80.0);
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))));
        cfg = SynthConfig { defect_rate: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rerun_is_byte_identical() {
        let cfg = SynthConfig { n_images: 4, n_negatives: 2, ..small() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &synth_generate(&cfg).unwrap(), 1).unwrap();
        write_dataset(b.path(), &synth_generate(&cfg).unwrap(), 1).unwrap();
        let idx = DatasetIndex::load(a.path()).unwrap();
        for rel in idx.positives.iter().chain(&idx.negatives).chain(idx.annotations.values()) {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap()
            );
        }
        assert_eq!(
            std::fs::read(a.path().join("index.json")).unwrap(),
            std::fs::read(b.path().join("index.json")).unwrap()
        );
    }
}
