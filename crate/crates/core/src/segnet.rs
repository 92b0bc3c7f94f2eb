//! One-class blade segmenter: a U-Net style encoder/decoder trained on
//! pseudo ground truth plus blade-free negatives.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{
    connected_components, threshold_mask, BinaryMask, BoundingBox, ColorSpace, Connectivity, ImageBuffer, ScalarMap,
};
use crate::ingest::{anchors, augment, stream_rng, TrainSample};
use crate::io::{read_bytes, write_bytes};
use crate::nn::{
    bce_with_logits, images_to_tensor, max_pool2x2, scalar, Archive, Conv2d, ConvTranspose2d, Optimizer, OptimizerKind,
    OptimizerSettings, ParamStore,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            base_channels: 16,
            input_size: (64, 64),
            in_channels: 3,
            out_channels: 1,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("segnet depth and channel counts must be ≥ 1".into()));
        }
        let step = 1usize << self.depth;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} is not divisible by 2^{} = {step}",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// `(C, H, W)` of the deepest encoder output.
    pub fn bottleneck_shape(&self) -> (usize, usize, usize) {
        (
            self.stage_channels(self.depth - 1),
            self.input_size.0 >> self.depth,
            self.input_size.1 >> self.depth,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Random quarter turns, flips and crops to `input_size`.
    pub augment: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-8,
            momentum: 0.9,
            batch_size: 10,
            epochs: 30,
            optimizer: OptimizerKind::RmspropLike,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainHyper {
    /// Settings that train the desk-scale network reliably on one CPU core:
    /// the default optimizer with a smaller step and batch.
    pub fn desk() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 2,
            epochs: 25,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        Ok(())
    }

    fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            kind: self.optimizer,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

pub struct SegNet {
    cfg: SegNetConfig,
    store: ParamStore,
    encoder: Vec<[Conv2d; 2]>,
    up: Vec<ConvTranspose2d>,
    decoder: Vec<[Conv2d; 2]>,
    head: Conv2d,
}

/// Builds a U-Net with freshly initialized weights.
pub fn build_model(cfg: &SegNetConfig, seed: u64) -> Result<SegNet> {
    SegNet::new(cfg, DType::F32, seed)
}

impl SegNet {
    pub fn new(cfg: &SegNetConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let mut encoder = Vec::with_capacity(cfg.depth);
        let mut c_in = cfg.in_channels;
        for i in 0..cfg.depth {
            let c = cfg.stage_channels(i);
            encoder.push([
                Conv2d::new(&mut store, &format!("enc{i}.0"), c_in, c, 3, 1, 1)?,
                Conv2d::new(&mut store, &format!("enc{i}.1"), c, c, 3, 1, 1)?,
            ]);
            c_in = c;
        }
        // decoder runs deepest first
        let mut up = Vec::with_capacity(cfg.depth);
        let mut decoder = Vec::with_capacity(cfg.depth);
        for i in (0..cfg.depth).rev() {
            let c = cfg.stage_channels(i);
            up.push(ConvTranspose2d::new(&mut store, &format!("up{i}"), c_in, c, 2, 2)?);
            decoder.push([
                Conv2d::new(&mut store, &format!("dec{i}.0"), 2 * c, c, 3, 1, 1)?,
                Conv2d::new(&mut store, &format!("dec{i}.1"), c, c, 3, 1, 1)?,
            ]);
            c_in = c;
        }
        let head = Conv2d::new(&mut store, "head", c_in, cfg.out_channels, 1, 1, 0)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            up,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Encoder pass: per-stage skip features and the pooled bottleneck.
    pub fn encode(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x.clone();
        for [a, b] in &self.encoder {
            h = b.forward(&a.forward(&h)?.relu()?)?.relu()?;
            skips.push(h.clone());
            h = max_pool2x2(&h)?;
        }
        Ok((skips, h))
    }

    /// Logits `(N, out_channels, H, W)` for input `(N, in_channels, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (mut skips, mut h) = self.encode(x)?;
        for (up, [a, b]) in self.up.iter().zip(&self.decoder) {
            let skip = skips.pop().expect("one skip per stage");
            h = Tensor::cat(&[&up.forward(&h)?, &skip], 1)?;
            h = b.forward(&a.forward(&h)?.relu()?)?.relu()?;
        }
        self.head.forward(&h)
    }

    /// Mean BCE-with-logits of a batch against `(N, 1, H, W)` targets.
    pub fn loss(&self, x: &Tensor, target: &Tensor) -> Result<Tensor> {
        bce_with_logits(&self.forward(x)?, target)
    }
}

/// Mean binary cross-entropy on logits,
/// `max(z,0) − z·y + ln(1 + e^{−|z|})` per pixel.
pub fn bce_logits(logits: &[f64], target: &[bool]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::Shape(format!("{} logits vs {} targets", logits.len(), target.len())));
    }
    if logits.is_empty() {
        return Err(Error::Shape("empty input".into()));
    }
    let sum: f64 = logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| z.max(0.0) - if y { z } else { 0.0 } + (-z.abs()).exp().ln_1p())
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Analytic gradient of [`bce_logits`]: `(σ(z) − y) / n`.
pub fn bce_logits_grad(logits: &[f64], target: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != target.len() {
        return Err(Error::Shape(format!("{} logits vs {} targets", logits.len(), target.len())));
    }
    let n = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| (sigmoid(z) - y as u8 as f64) / n)
        .collect())
}

pub fn bce_logits_loss(logits: &ScalarMap, target: &BinaryMask) -> Result<f64> {
    if logits.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let z: Vec<f64> = logits.data.iter().map(|&v| v as f64).collect();
    bce_logits(&z, target.bits())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub struct Checkpoint {
    pub model: SegNet,
    pub hyper: TrainHyper,
    pub seed: u64,
    pub training_log: Vec<EpochLoss>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: SegNetConfig,
    hyper: TrainHyper,
    seed: u64,
    training_log: Vec<EpochLoss>,
}

pub const SEGNET_KIND: &str = "segnet";

impl Checkpoint {
    pub fn config(&self) -> &SegNetConfig {
        self.model.config()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            config: self.model.cfg.clone(),
            hyper: self.hyper.clone(),
            seed: self.seed,
            training_log: self.training_log.clone(),
        };
        Archive {
            kind: SEGNET_KIND.into(),
            meta: serde_json::to_value(meta)?,
            tensors: self.model.store.export()?,
        }
        .to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let archive = Archive::from_bytes(bytes)?;
        if archive.kind != SEGNET_KIND {
            return Err(Error::Data(format!("expected a {SEGNET_KIND} checkpoint, found {}", archive.kind)));
        }
        let meta: CheckpointMeta = serde_json::from_value(archive.meta)?;
        let model = build_model(&meta.config, meta.seed)?;
        model.store.import(&archive.tensors)?;
        Ok(Self {
            model,
            hyper: meta.hyper,
            seed: meta.seed,
            training_log: meta.training_log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?)
    }
}

fn mask_tensor(masks: &[&BinaryMask], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = masks[0].shape();
    let data: Vec<f32> = masks
        .iter()
        .flat_map(|m| m.bits().iter().map(|&b| b as u8 as f32))
        .collect();
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Mini-batch training on positives and negatives. Deterministic for a fixed
/// `hyper.seed`: initialization, per-epoch shuffles and augmentation draws all
/// come from seeded streams.
pub fn train_segmenter(data: &[TrainSample], cfg: &SegNetConfig, hyper: &TrainHyper) -> Result<Checkpoint> {
    cfg.validate()?;
    hyper.validate()?;
    if !data.iter().any(|s| s.is_negative) || !data.iter().any(|s| !s.is_negative) {
        return Err(Error::Data(
            "training needs at least one positive and one negative sample".into(),
        ));
    }
    for s in data {
        if s.image.channels() != cfg.in_channels {
            return Err(Error::Data(format!(
                "sample {} has {} channels, model expects {}",
                s.image.source_id,
                s.image.channels(),
                cfg.in_channels
            )));
        }
        if !hyper.augment && s.image.shape() != cfg.input_size {
            return Err(Error::Data(format!(
                "sample {} is {:?}; without augmentation samples must be {:?}",
                s.image.source_id,
                s.image.shape(),
                cfg.input_size
            )));
        }
    }
    let model = build_model(cfg, hyper.seed)?;
    let mut opt = Optimizer::new(model.store.vars().cloned().collect(), hyper.optimizer_settings())?;
    let mut log = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..hyper.epochs {
        let mut rng = stream_rng(hyper.seed, epoch as u64 + 1);
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<TrainSample> = if hyper.augment {
                chunk
                    .iter()
                    .map(|&i| {
                        let draw_seed = hyper
                            .seed
                            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                            .wrapping_add(((epoch as u64) << 32) | i as u64);
                        augment(&data[i], cfg.input_size, draw_seed)
                    })
                    .collect::<Result<_>>()?
            } else {
                chunk.iter().map(|&i| data[i].clone()).collect()
            };
            let images: Vec<&ImageBuffer> = batch.iter().map(|s| &s.image).collect();
            let targets: Vec<&BinaryMask> = batch.iter().map(|s| &s.target).collect();
            let x = images_to_tensor(&images, model.dtype(), model.device())?;
            let y = mask_tensor(&targets, model.dtype(), model.device())?;
            let loss = model.loss(&x, &y)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    lr: opt.lr(),
                    loss: value,
                });
            }
            opt.step(&loss.backward()?)?;
            total += value * chunk.len() as f64;
            seen += chunk.len();
        }
        let mean_loss = total / seen as f64;
        log::info!("segnet epoch {epoch}: mean loss {mean_loss:.5}");
        log.push(EpochLoss { epoch, mean_loss });
    }
    Ok(Checkpoint {
        model,
        hyper: hyper.clone(),
        seed: hyper.seed,
        training_log: log,
    })
}

/// Pads by edge replication up to at least `min_h×min_w`.
fn pad_to(img: &ImageBuffer, min_h: usize, min_w: usize) -> ImageBuffer {
    let (h, w) = img.shape();
    if h >= min_h && w >= min_w {
        return img.clone();
    }
    let (ph, pw) = (h.max(min_h), w.max(min_w));
    let c = img.channels();
    let mut data = Vec::with_capacity(ph * pw * c);
    for r in 0..ph {
        for col in 0..pw {
            data.extend_from_slice(img.pixel(r.min(h - 1), col.min(w - 1)));
        }
    }
    ImageBuffer::new(ph, pw, img.color_space(), data).expect("sizes match")
}

const PREDICT_BATCH: usize = 8;

/// Per-pixel blade probability at the input resolution. Images larger than
/// the model input are cut into overlapping windows (`stride` defaults to
/// the window size) and overlapping probabilities are averaged; smaller
/// images are edge-padded.
pub fn predict_mask(model: &SegNet, img: &ImageBuffer, stride: Option<usize>) -> Result<ScalarMap> {
    let img = match img.color_space() {
        ColorSpace::Lab => img.to_srgb()?,
        _ => img.clone(),
    };
    if img.channels() != model.cfg.in_channels {
        return Err(Error::Data(format!(
            "image has {} channels, model expects {}",
            img.channels(),
            model.cfg.in_channels
        )));
    }
    let (h, w) = img.shape();
    let (th, tw) = model.cfg.input_size;
    let padded = pad_to(&img, th, tw);
    let (ph, pw) = padded.shape();
    let (sh, sw) = match stride {
        Some(0) => return Err(Error::Parameter("stride must be ≥ 1".into())),
        Some(s) => (s.min(th), s.min(tw)),
        None => (th, tw),
    };
    let mut windows = Vec::new();
    for &r in &anchors(ph, th, sh) {
        for &c in &anchors(pw, tw, sw) {
            windows.push((r, c));
        }
    }
    let mut sum = vec![0.0f64; ph * pw];
    let mut hits = vec![0u32; ph * pw];
    for group in windows.chunks(PREDICT_BATCH) {
        let tiles: Vec<ImageBuffer> = group
            .iter()
            .map(|&(r, c)| padded.crop(BoundingBox { x0: c, y0: r, x1: c + tw, y1: r + th }))
            .collect();
        let refs: Vec<&ImageBuffer> = tiles.iter().collect();
        let x = images_to_tensor(&refs, model.dtype(), model.device())?;
        let probs: Vec<f64> = candle_core::Tensor::to_dtype(
            &candle_nn_sigmoid(&model.forward(&x)?.narrow(1, 0, 1)?)?,
            DType::F64,
        )?
        .flatten_all()?
        .to_vec1()?;
        for (k, &(r0, c0)) in group.iter().enumerate() {
            let tile = &probs[k * th * tw..(k + 1) * th * tw];
            for r in 0..th {
                for c in 0..tw {
                    let i = (r0 + r) * pw + c0 + c;
                    sum[i] += tile[r * tw + c];
                    hits[i] += 1;
                }
            }
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let i = r * pw + c;
            out.push((sum[i] / hits[i] as f64).clamp(0.0, 1.0) as f32);
        }
    }
    ScalarMap::new(h, w, out)
}

fn candle_nn_sigmoid(x: &Tensor) -> Result<Tensor> {
    // 1 / (1 + e^{−x}); saturates cleanly to 0 or 1 in f32
    Ok(x.neg()?.exp()?.affine(1.0, 1.0)?.recip()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractConfig {
    pub threshold: f64,
    pub min_area: usize,
    pub margin: usize,
    pub connectivity: Connectivity,
    /// Tiled inference stride; `None` uses the model input size.
    pub stride: Option<usize>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_area: 50,
            margin: 4,
            connectivity: Connectivity::Eight,
            stride: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BladeInstance {
    /// Crop of the source image around the blade, zero outside the mask.
    pub crop: ImageBuffer,
    /// Instance mask in source-image coordinates.
    pub mask: BinaryMask,
    /// Tight box around the mask.
    pub bbox: BoundingBox,
    /// Region the crop was cut from (`bbox` grown by the margin).
    pub crop_box: BoundingBox,
    /// Mean predicted probability inside the mask.
    pub confidence: f64,
}

impl BladeInstance {
    pub fn crop_mask(&self) -> BinaryMask {
        self.mask.crop(self.crop_box)
    }
}

/// Thresholds the raw map, splits it into components and cuts one masked
/// crop per component of at least `min_area` pixels, largest first.
pub fn extract_blades(img: &ImageBuffer, raw: &ScalarMap, cfg: &ExtractConfig) -> Result<Vec<BladeInstance>> {
    if img.shape() != raw.shape() {
        return Err(Error::Shape(format!("image {:?} vs map {:?}", img.shape(), raw.shape())));
    }
    let mask = threshold_mask(raw, cfg.threshold)?;
    let (h, w) = img.shape();
    let zero = vec![0.0f32; img.channels()];
    let mut out = Vec::new();
    for comp in connected_components(&mask, cfg.connectivity) {
        if comp.area < cfg.min_area {
            continue;
        }
        let crop_box = comp.bbox.expand(cfg.margin, h, w);
        let crop = img.masked(&comp.mask, &zero)?.crop(crop_box);
        let inside: f64 = comp
            .mask
            .bits()
            .iter()
            .zip(&raw.data)
            .filter(|(&b, _)| b)
            .map(|(_, &p)| p as f64)
            .sum();
        out.push(BladeInstance {
            crop: crop.with_source(img.source_id.clone()),
            confidence: inside / comp.area as f64,
            mask: comp.mask,
            bbox: comp.bbox,
            crop_box,
        });
    }
    Ok(out)
}
