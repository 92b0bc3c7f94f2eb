//! Dataset layout, tiling, augmentation, negative sampling and splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_shape, BinaryMask, ImageBuffer, ScalarMap};
use crate::io;

/// Independent random stream `stream` derived from a master seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: ImageBuffer,
    pub target: BinaryMask,
    pub is_negative: bool,
}

impl TrainSample {
    pub fn positive(image: ImageBuffer, target: BinaryMask) -> Result<Self> {
        check_shape(image.shape(), target.shape())?;
        Ok(Self {
            image,
            target,
            is_negative: false,
        })
    }

    pub fn negative(image: ImageBuffer) -> Self {
        let (h, w) = image.shape();
        Self {
            image,
            target: BinaryMask::empty(h, w),
            is_negative: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectRecord {
    pub kind: crate::synth::DefectKind,
    pub mask: String,
}

/// `index.json` manifest. Paths are relative to the dataset root.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    #[serde(default)]
    pub annotations: BTreeMap<String, String>,
    #[serde(default)]
    pub defects: BTreeMap<String, Vec<DefectRecord>>,
    pub split_seed: u64,
}

pub const INDEX_FILE: &str = "index.json";

impl DatasetIndex {
    pub fn load(root: &Path) -> Result<Self> {
        let idx: DatasetIndex = io::read_json(&root.join(INDEX_FILE))?;
        idx.validate(root)?;
        Ok(idx)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        io::write_json(&root.join(INDEX_FILE), self)
    }

    pub fn validate(&self, root: &Path) -> Result<()> {
        let pos: BTreeSet<&String> = self.positives.iter().collect();
        if let Some(p) = self.negatives.iter().find(|n| pos.contains(n)) {
            return Err(Error::Data(format!("{p} listed as both positive and negative")));
        }
        let referenced = self
            .positives
            .iter()
            .chain(&self.negatives)
            .chain(self.annotations.values())
            .chain(self.defects.values().flatten().map(|d| &d.mask));
        for rel in referenced {
            if !root.join(rel).is_file() {
                return Err(Error::Data(format!("{} is missing", root.join(rel).display())));
            }
        }
        Ok(())
    }

    /// Train/test partition of the positives under the index's split seed.
    pub fn split_positives(&self, test_fraction: f64) -> Result<(Vec<String>, Vec<String>)> {
        split_dataset(&self.positives, test_fraction, self.split_seed)
    }
}

/// File stem used as the image id throughout the pipeline.
pub fn image_id(rel: &str) -> String {
    Path::new(rel)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| rel.to_string())
}

pub(crate) fn anchors(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        out.push(pos);
        if pos + tile >= extent {
            break;
        }
        pos = (pos + stride).min(extent - tile);
    }
    out
}

/// Cuts `tile×tile` windows every `stride` pixels; the last row and column of
/// windows are pulled back to end flush with the image edge. Offsets are
/// `(row, col)`.
pub fn tile_image(img: &ImageBuffer, tile: usize, stride: usize) -> Result<Vec<(ImageBuffer, (usize, usize))>> {
    if tile == 0 || stride == 0 {
        return Err(Error::Parameter("tile and stride must be ≥ 1".into()));
    }
    if stride > tile {
        return Err(Error::Parameter(format!("stride {stride} > tile {tile} leaves gaps")));
    }
    if tile > img.height().min(img.width()) {
        return Err(Error::Parameter(format!(
            "tile {tile} larger than {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let mut out = Vec::new();
    for &r in &anchors(img.height(), tile, stride) {
        for &c in &anchors(img.width(), tile, stride) {
            let bbox = crate::image::BoundingBox { x0: c, y0: r, x1: c + tile, y1: r + tile };
            out.push((img.crop(bbox), (r, c)));
        }
    }
    Ok(out)
}

/// Pastes tiles back at their offsets; later tiles overwrite earlier ones.
pub fn untile(tiles: &[(ImageBuffer, (usize, usize))], template: &ImageBuffer) -> Result<ImageBuffer> {
    let mut out = template.clone();
    for (t, (r, c)) in tiles {
        out.paste(t, *r, *c)?;
    }
    Ok(out)
}

/// Pastes per-tile maps and averages where tiles overlap.
pub fn untile_average(tiles: &[(ScalarMap, (usize, usize))], height: usize, width: usize) -> Result<ScalarMap> {
    let mut sum = vec![0.0f64; height * width];
    let mut hits = vec![0u32; height * width];
    for (t, (r0, c0)) in tiles {
        if r0 + t.height > height || c0 + t.width > width {
            return Err(Error::Shape("tile exceeds reassembly frame".into()));
        }
        for r in 0..t.height {
            for c in 0..t.width {
                let i = (r0 + r) * width + c0 + c;
                sum[i] += t.get(r, c) as f64;
                hits[i] += 1;
            }
        }
    }
    if hits.iter().any(|&h| h == 0) {
        return Err(Error::Shape("tiles do not cover the frame".into()));
    }
    ScalarMap::new(
        height,
        width,
        sum.iter().zip(&hits).map(|(&s, &n)| (s / n as f64) as f32).collect(),
    )
}

/// Bilinear resize to `(round(H·f), round(W·f))`.
pub fn rescale(img: &ImageBuffer, factor: f64) -> Result<ImageBuffer> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Parameter(format!("scale factor {factor} must be > 0")));
    }
    let h = (img.height() as f64 * factor).round() as usize;
    let w = (img.width() as f64 * factor).round() as usize;
    if h < 1 || w < 1 {
        return Err(Error::Parameter(format!(
            "scaling {}x{} by {factor} leaves no pixels",
            img.height(),
            img.width()
        )));
    }
    if (h, w) == img.shape() {
        return Ok(img.clone());
    }
    Ok(img.resize(h, w))
}

/// One concrete draw of the geometric augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    /// Counter-clockwise quarter turns.
    pub quarter_turns: u8,
    pub flip: bool,
    pub crop_origin: (usize, usize),
    pub crop_size: (usize, usize),
}

impl Augmentation {
    /// Rotation uniform over {0, 90, 180, 270}, horizontal flip with
    /// probability ½, then a uniformly placed crop.
    pub fn draw(shape: (usize, usize), crop_size: (usize, usize), seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let quarter_turns = rng.random_range(0..4u8);
        let flip = rng.random_bool(0.5);
        let (h, w) = if quarter_turns % 2 == 1 { (shape.1, shape.0) } else { shape };
        if crop_size.0 > h || crop_size.1 > w || crop_size.0 == 0 || crop_size.1 == 0 {
            return Err(Error::Parameter(format!(
                "crop {}x{} does not fit a {h}x{w} sample",
                crop_size.0, crop_size.1
            )));
        }
        let crop_origin = (
            rng.random_range(0..=h - crop_size.0),
            rng.random_range(0..=w - crop_size.1),
        );
        Ok(Self {
            quarter_turns,
            flip,
            crop_origin,
            crop_size,
        })
    }

    pub fn apply(&self, s: &TrainSample) -> Result<TrainSample> {
        let mut image = s.image.rot90(self.quarter_turns);
        let mut target = s.target.rot90(self.quarter_turns);
        if self.flip {
            image = image.flip_horizontal();
            target = target.flip_horizontal();
        }
        let (r, c) = self.crop_origin;
        let (ch, cw) = self.crop_size;
        if r + ch > image.height() || c + cw > image.width() {
            return Err(Error::Parameter("crop exceeds sample".into()));
        }
        let bbox = crate::image::BoundingBox { x0: c, y0: r, x1: c + cw, y1: r + ch };
        Ok(TrainSample {
            image: image.crop(bbox),
            target: target.crop(bbox),
            is_negative: s.is_negative,
        })
    }
}

pub fn augment(s: &TrainSample, crop_size: (usize, usize), seed: u64) -> Result<TrainSample> {
    Augmentation::draw(s.image.shape(), crop_size, seed)?.apply(s)
}

/// Draws `n` negatives with replacement from an in-memory pool.
pub fn sample_negative_images(pool: &[ImageBuffer], n: usize, seed: u64) -> Result<Vec<TrainSample>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if pool.is_empty() {
        return Err(Error::Config("negative pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| TrainSample::negative(pool[rng.random_range(0..pool.len())].clone()))
        .collect())
}

/// Draws `n` negatives with replacement from the index, loading each drawn file.
pub fn sample_negatives(idx: &DatasetIndex, root: &Path, n: usize, seed: u64) -> Result<Vec<TrainSample>> {
    if idx.negatives.is_empty() {
        return Err(Error::Config("dataset has no negative images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache: BTreeMap<usize, ImageBuffer> = BTreeMap::new();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..idx.negatives.len());
        if !cache.contains_key(&k) {
            cache.insert(k, io::read_image_png(&root.join(&idx.negatives[k]))?);
        }
        out.push(TrainSample::negative(cache[&k].clone()));
    }
    Ok(out)
}

/// Seeded shuffle, then the first `round(f·n)` items form the test set. Both
/// halves keep the input order.
pub fn split_dataset<T: Clone>(items: &[T], test_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Parameter(format!("test fraction {test_fraction} outside (0,1)")));
    }
    if items.len() < 2 {
        return Err(Error::Parameter(format!("cannot split {} items", items.len())));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (test_fraction * items.len() as f64).round() as usize;
    let mut test_idx = order[..n_test].to_vec();
    let mut train_idx = order[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| items[i].clone()).collect(),
        test_idx.iter().map(|&i| items[i].clone()).collect(),
    ))
}
