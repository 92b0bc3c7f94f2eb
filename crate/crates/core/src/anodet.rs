//! Reconstruction-based anomaly scorers trained on defect-free superpixel
//! patches: a variational autoencoder, an encoder-decoder-encoder with a
//! latent residual, and an autoencoder with narrow skip connections.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ColorSpace, ImageBuffer, ScalarMap};
use crate::ingest::stream_rng;
use crate::io::{read_bytes, write_bytes};
use crate::nn::{
    bce_with_logits, images_to_tensor, kl_standard_normal_rows, leaky_relu, leaky_relu_init_scale, scalar, Archive, Conv2d,
    ConvTranspose2d, Linear, Optimizer, OptimizerKind, OptimizerSettings, ParamStore,
};
use crate::segnet::EpochLoss;
use crate::slic::PatchSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Vae,
    LatentResidual,
    SkipAe,
}

impl DetectorKind {
    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Vae => "vae",
            DetectorKind::LatentResidual => "latent_residual",
            DetectorKind::SkipAe => "skip_ae",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub latent_dim: usize,
    /// Side of the square input patch; a multiple of 8.
    pub patch_size: usize,
    /// KL weight of the VAE loss.
    pub beta: f64,
    /// Weight of the latent term in the anomaly score.
    pub lambda_latent: f64,
    /// Adds a patch discriminator with a feature-matching term.
    pub adversarial: bool,
    /// Channels of the first encoder stage; later stages double.
    pub base_channels: usize,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            kind: DetectorKind::Vae,
            latent_dim: 64,
            patch_size: 64,
            beta: 1.0,
            lambda_latent: 0.5,
            adversarial: false,
            base_channels: 16,
            seed: 0,
            epochs: 20,
            lr: 1e-3,
            batch_size: 16,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_latent) {
            return Err(Error::Config(format!("lambda_latent {} outside [0, 1]", self.lambda_latent)));
        }
        if self.patch_size == 0 || self.patch_size % 8 != 0 {
            return Err(Error::Config(format!("patch_size {} must be a positive multiple of 8", self.patch_size)));
        }
        if self.base_channels == 0 || self.batch_size == 0 {
            return Err(Error::Config("base_channels and batch_size must be ≥ 1".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta {} must be ≥ 0", self.beta)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        Ok(())
    }

    /// Score mix actually applied; the skip autoencoder has no latent term.
    pub fn effective_lambda(&self) -> f64 {
        match self.kind {
            DetectorKind::SkipAe => 0.0,
            _ => self.lambda_latent,
        }
    }
}

/// `½ Σ (exp(logvar) + mu² − 1 − logvar)`.
pub fn kl_standard_normal(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::Shape(format!("mu has {} entries, logvar {}", mu.len(), logvar.len())));
    }
    Ok(0.5 * mu.iter().zip(logvar).map(|(&m, &lv)| lv.exp() + m * m - 1.0 - lv).sum::<f64>())
}

const SLOPE: f64 = 0.2;
const SKIP_CHANNELS: usize = 8;
const FEATURE_MATCH_WEIGHT: f64 = 1.0;

/// Layers followed by a leaky ReLU keep unit activation scale.
fn gain() -> f64 {
    leaky_relu_init_scale(SLOPE)
}

/// Three stride-2 3×3 convolutions; returns the activation of every stage.
struct ConvStack {
    convs: Vec<Conv2d>,
}

impl ConvStack {
    fn new(store: &mut ParamStore, name: &str, base: usize) -> Result<Self> {
        let chans = [3, base, 2 * base, 4 * base];
        let convs = (0..3)
            .map(|i| Conv2d::scaled(store, &format!("{name}.{i}"), chans[i], chans[i + 1], 3, 2, 1, gain()))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(3);
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?, SLOPE)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

struct UpStage {
    up: ConvTranspose2d,
    conv: Conv2d,
}

pub struct Detector {
    cfg: DetectorConfig,
    store: ParamStore,
    encoder: ConvStack,
    to_latent: Linear,
    from_latent: Linear,
    /// 1×1 projections of the two coarsest encoder stages (skip_ae only).
    skips: Vec<Conv2d>,
    stages: Vec<UpStage>,
    out: Conv2d,
    /// Second encoder of the latent-residual model.
    encoder2: Option<(ConvStack, Linear)>,
}

/// Intermediate tensors of one forward pass.
struct Pass {
    mu: Tensor,
    logvar: Option<Tensor>,
    recon: Tensor,
    z2: Option<Tensor>,
}

impl Detector {
    pub fn new(cfg: &DetectorConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, cfg.seed);
        let b = cfg.base_channels;
        let g = cfg.patch_size / 8;
        let flat = 4 * b * g * g;
        let encoder = ConvStack::new(&mut store, "enc", b)?;
        let latent_out = match cfg.kind {
            DetectorKind::Vae => 2 * cfg.latent_dim,
            _ => cfg.latent_dim,
        };
        let to_latent = Linear::new(&mut store, "enc.latent", flat, latent_out)?;
        let from_latent = Linear::scaled(&mut store, "dec.latent", cfg.latent_dim, flat, gain())?;
        let skips = if cfg.kind == DetectorKind::SkipAe {
            vec![
                Conv2d::scaled(&mut store, "skip.0", 4 * b, SKIP_CHANNELS, 1, 1, 0, gain())?,
                Conv2d::scaled(&mut store, "skip.1", 2 * b, SKIP_CHANNELS, 1, 1, 0, gain())?,
            ]
        } else {
            Vec::new()
        };
        let skip_in = |i: usize| if i < skips.len() { SKIP_CHANNELS } else { 0 };
        // stage i upsamples to the resolution of encoder stage 1 - i
        let ins = [4 * b + skip_in(0), 2 * b, b];
        let outs = [2 * b, b, b];
        let mut stages = Vec::new();
        for i in 0..3 {
            let up = ConvTranspose2d::scaled(&mut store, &format!("dec.{i}.up"), ins[i], outs[i], 2, 2, gain())?;
            let conv_in = outs[i] + if i == 0 { skip_in(1) } else { 0 };
            let conv = Conv2d::scaled(&mut store, &format!("dec.{i}.conv"), conv_in, outs[i], 3, 1, 1, gain())?;
            stages.push(UpStage { up, conv });
        }
        let out = Conv2d::new(&mut store, "dec.out", b, 3, 3, 1, 1)?;
        let encoder2 = if cfg.kind == DetectorKind::LatentResidual {
            Some((
                ConvStack::new(&mut store, "enc2", b)?,
                Linear::new(&mut store, "enc2.latent", flat, cfg.latent_dim)?,
            ))
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            to_latent,
            from_latent,
            skips,
            stages,
            out,
            encoder2,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    fn flatten(x: &Tensor) -> Result<Tensor> {
        Ok(x.flatten_from(1)?)
    }

    fn decode(&self, z: &Tensor, feats: &[Tensor]) -> Result<Tensor> {
        let n = z.dim(0)?;
        let b = self.cfg.base_channels;
        let g = self.cfg.patch_size / 8;
        let mut h = leaky_relu(&self.from_latent.forward(z)?.reshape((n, 4 * b, g, g))?, SLOPE)?;
        if let Some(proj) = self.skips.first() {
            h = Tensor::cat(&[h, leaky_relu(&proj.forward(&feats[2])?, SLOPE)?], 1)?;
        }
        for (i, stage) in self.stages.iter().enumerate() {
            h = leaky_relu(&stage.up.forward(&h)?, SLOPE)?;
            if i == 0 {
                if let Some(proj) = self.skips.get(1) {
                    h = Tensor::cat(&[h, leaky_relu(&proj.forward(&feats[1])?, SLOPE)?], 1)?;
                }
            }
            h = leaky_relu(&stage.conv.forward(&h)?, SLOPE)?;
        }
        Ok(self.out.forward(&h)?)
    }

    /// `noise` supplies the VAE reparameterization draw; `None` decodes the
    /// mean.
    fn pass(&self, x: &Tensor, noise: Option<&mut ChaCha8Rng>) -> Result<Pass> {
        let feats = self.encoder.forward(x)?;
        let code = self.to_latent.forward(&Self::flatten(&feats[2])?)?;
        let l = self.cfg.latent_dim;
        let (mu, logvar) = match self.cfg.kind {
            DetectorKind::Vae => (code.narrow(1, 0, l)?, Some(code.narrow(1, l, l)?)),
            _ => (code, None),
        };
        let z = match (&logvar, noise) {
            (Some(lv), Some(rng)) => {
                let n = mu.dim(0)?;
                let draws: Vec<f32> = (0..n * l).map(|_| StandardNormal.sample(rng)).collect();
                let eps = Tensor::from_vec(draws, (n, l), self.device())?.to_dtype(mu.dtype())?;
                (&mu + (lv.affine(0.5, 0.0)?.exp()? * eps)?)?
            }
            _ => mu.clone(),
        };
        let recon = self.decode(&z, &feats)?;
        let z2 = match &self.encoder2 {
            Some((enc, lin)) => Some(lin.forward(&Self::flatten(&enc.forward(&recon)?[2])?)?),
            None => None,
        };
        Ok(Pass { mu, logvar, recon, z2 })
    }

    /// Batch-mean training objective: summed squared reconstruction error
    /// plus the kind's latent penalty.
    pub fn loss(&self, x: &Tensor, noise: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let p = self.pass(x, noise)?;
        Ok(self.loss_of(x, &p)?.mean(0)?)
    }

    /// Per-sample objective, shape `(N,)`.
    fn loss_of(&self, x: &Tensor, p: &Pass) -> Result<Tensor> {
        let recon = (x - &p.recon)?.sqr()?.flatten_from(1)?.sum(D::Minus1)?;
        Ok(match self.cfg.kind {
            DetectorKind::Vae => {
                let kl = kl_standard_normal_rows(&p.mu, p.logvar.as_ref().expect("vae has logvar"))?;
                (recon + kl.affine(self.cfg.beta, 0.0)?)?
            }
            DetectorKind::LatentResidual => {
                let z2 = p.z2.as_ref().expect("latent residual has a second encoder");
                (recon + (&p.mu - z2)?.sqr()?.sum(D::Minus1)?)?
            }
            DetectorKind::SkipAe => recon,
        })
    }
}

/// Small convolutional critic used only during adversarial training.
struct Discriminator {
    store: ParamStore,
    convs: ConvStack,
    head: Linear,
}

impl Discriminator {
    fn new(cfg: &DetectorConfig, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(dtype, cfg.seed.wrapping_add(0xD15C));
        let g = cfg.patch_size / 8;
        let convs = ConvStack::new(&mut store, "disc", cfg.base_channels)?;
        let head = Linear::new(&mut store, "disc.head", 4 * cfg.base_channels * g * g, 1)?;
        Ok(Self { store, convs, head })
    }

    /// `(features, logits)`.
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.convs.forward(x)?.pop().expect("three stages").flatten_from(1)?;
        let logits = self.head.forward(&f)?;
        Ok((f, logits))
    }
}

/// Per-channel statistics of the normal training patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    fn fit(patches: &[&ImageBuffer]) -> Self {
        let c = patches[0].channels();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut n = 0usize;
        for p in patches {
            for px in p.data().chunks_exact(c) {
                for (k, &v) in px.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64).powi(2);
                }
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n as f64 - m * m).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.mean.len();
        let dev = x.device();
        let mean = Tensor::from_slice(&self.mean, (1, c, 1, 1), dev)?.to_dtype(x.dtype())?;
        let std = Tensor::from_slice(&self.std, (1, c, 1, 1), dev)?.to_dtype(x.dtype())?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }
}

pub struct DetectorCheckpoint {
    pub model: Detector,
    pub norm: Normalization,
    pub training_log: Vec<EpochLoss>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorMeta {
    config: DetectorConfig,
    norm: Normalization,
    training_log: Vec<EpochLoss>,
}

pub const DETECTOR_KIND: &str = "detector";

impl DetectorCheckpoint {
    pub fn config(&self) -> &DetectorConfig {
        &self.model.cfg
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = DetectorMeta {
            config: self.model.cfg.clone(),
            norm: self.norm.clone(),
            training_log: self.training_log.clone(),
        };
        Archive {
            kind: DETECTOR_KIND.into(),
            meta: serde_json::to_value(meta)?,
            tensors: self.model.store.export()?,
        }
        .to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let archive = Archive::from_bytes(bytes)?;
        if archive.kind != DETECTOR_KIND {
            return Err(Error::Data(format!("expected a {DETECTOR_KIND} checkpoint, found {}", archive.kind)));
        }
        let meta: DetectorMeta = serde_json::from_value(archive.meta)?;
        let model = Detector::new(&meta.config, DType::F32)?;
        model.store.import(&archive.tensors)?;
        Ok(Self {
            model,
            norm: meta.norm,
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

fn patch_rgb(p: &PatchSample) -> Result<ImageBuffer> {
    match p.image.color_space() {
        ColorSpace::Lab => p.image.to_srgb(),
        _ => Ok(p.image.clone()),
    }
}

fn check_patch(p: &ImageBuffer, size: usize) -> Result<()> {
    if p.shape() != (size, size) || p.channels() != 3 {
        return Err(Error::Shape(format!(
            "patch is {:?}x{}, detector expects {size}x{size}x3",
            p.shape(),
            p.channels()
        )));
    }
    Ok(())
}

/// Trains the configured scorer on normal patches with Adam. Deterministic
/// for a fixed seed.
pub fn train_detector(patches: &[PatchSample], cfg: &DetectorConfig) -> Result<DetectorCheckpoint> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::Data("no training patches".into()));
    }
    let images: Vec<ImageBuffer> = patches.iter().map(patch_rgb).collect::<Result<_>>()?;
    for img in &images {
        check_patch(img, cfg.patch_size)?;
    }
    let refs: Vec<&ImageBuffer> = images.iter().collect();
    let norm = Normalization::fit(&refs);
    let model = Detector::new(cfg, DType::F32)?;
    let data = norm.apply(&images_to_tensor(&refs, DType::F32, model.device())?)?;
    let settings = OptimizerSettings {
        kind: OptimizerKind::Adam,
        lr: cfg.lr,
        momentum: 0.0,
        weight_decay: 0.0,
    };
    let mut opt = Optimizer::new(model.store.vars().cloned().collect(), settings)?;
    let mut disc = if cfg.adversarial {
        let d = Discriminator::new(cfg, DType::F32)?;
        let o = Optimizer::new(d.store.vars().cloned().collect(), settings)?;
        Some((d, o))
    } else {
        None
    };
    let mut order: Vec<u32> = (0..patches.len() as u32).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64 + 1));
        let mut noise = stream_rng(cfg.seed, (1 << 40) | epoch as u64);
        let (mut total, mut seen) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let idx = Tensor::from_slice(chunk, chunk.len(), model.device())?;
            let x = data.index_select(&idx, 0)?;
            let pass = model.pass(&x, Some(&mut noise))?;
            let per_sample = model.loss_of(&x, &pass)?;
            let mut loss = per_sample.mean(0)?;
            let value = scalar(&loss)?;
            if let Some((d, d_opt)) = disc.as_mut() {
                let (f_real, real_logits) = d.forward(&x)?;
                let (_, fake_logits) = d.forward(&pass.recon.detach())?;
                let ones = Tensor::ones_like(&real_logits)?;
                let zeros = Tensor::zeros_like(&fake_logits)?;
                let d_loss = (bce_with_logits(&real_logits, &ones)? + bce_with_logits(&fake_logits, &zeros)?)?;
                d_opt.step(&d_loss.backward()?)?;
                // generator side: match critic features of real and reconstructed batches
                let (f_gen, _) = d.forward(&pass.recon)?;
                let fm = (f_real.detach().mean(0)? - f_gen.mean(0)?)?.sqr()?.mean_all()?;
                loss = (loss + fm.affine(FEATURE_MATCH_WEIGHT, 0.0)?)?;
            }
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    lr: cfg.lr,
                    loss: value,
                });
            }
            opt.step(&loss.backward()?)?;
            total += value * chunk.len() as f64;
            seen += chunk.len();
        }
        let mean_loss = total / seen as f64;
        log::info!("{} epoch {epoch}: mean loss {mean_loss:.5}", cfg.kind.name());
        log.push(EpochLoss { epoch, mean_loss });
    }
    Ok(DetectorCheckpoint {
        model,
        norm,
        training_log: log,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPatch {
    pub patch: PatchSample,
    pub score: f64,
    /// Channel-mean absolute residual in normalized units.
    pub heatmap: ScalarMap,
    /// Latent term before mixing: the encoding's KL for the VAE, the latent
    /// residual norm for the encoder-decoder-encoder, zero otherwise.
    pub latent: f64,
}

/// Scores one patch. Inference uses the posterior mean, so repeated calls
/// give identical results.
pub fn score(ckpt: &DetectorCheckpoint, patch: &PatchSample) -> Result<ScoredPatch> {
    let model = &ckpt.model;
    let cfg = &model.cfg;
    let img = patch_rgb(patch)?;
    check_patch(&img, cfg.patch_size)?;
    let x = ckpt.norm.apply(&images_to_tensor(&[&img], DType::F32, model.device())?)?;
    let p = model.pass(&x, None)?;
    let size = cfg.patch_size;
    let heat: Vec<f32> = (&x - &p.recon)?
        .abs()?
        .mean(1)?
        .flatten_all()?
        .to_dtype(DType::F32)?
        .to_vec1()?;
    let heatmap = ScalarMap::new(size, size, heat)?;
    let latent = match cfg.kind {
        DetectorKind::Vae => scalar(&kl_standard_normal_rows(&p.mu, p.logvar.as_ref().expect("vae"))?.sum_all()?)?,
        DetectorKind::LatentResidual => {
            scalar(&(&p.mu - p.z2.as_ref().expect("second encoder"))?.sqr()?.sum_all()?)?.sqrt()
        }
        DetectorKind::SkipAe => 0.0,
    };
    let lambda = cfg.effective_lambda();
    let score = (1.0 - lambda) * heatmap.mean() + lambda * latent;
    if !score.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            batch: 0,
            lr: 0.0,
            loss: score,
        });
    }
    Ok(ScoredPatch {
        patch: patch.clone(),
        score,
        heatmap,
        latent,
    })
}

pub fn score_all(ckpt: &DetectorCheckpoint, patches: &[PatchSample]) -> Result<Vec<ScoredPatch>> {
    patches.iter().map(|p| score(ckpt, p)).collect()
}

/// Nearest-rank quantile: the smallest value with at least `q·n` values at
/// or below it.
pub fn nearest_rank(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Data("quantile of an empty list".into()));
    }
    if !(q > 0.0 && q < 1.0) && q != 1.0 {
        return Err(Error::Parameter(format!("quantile level {q} outside (0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Empirical `q`-quantile of held-out normal scores.
pub fn calibrate_threshold(normal_scores: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Parameter(format!("q = {q} outside (0, 1)")));
    }
    nearest_rank(normal_scores, q)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlaggedPatch {
    pub patch: PatchSample,
    pub score: f64,
    /// Heatmap pixels at or above the heatmap's own `heat_q` quantile.
    pub hot: BinaryMask,
}

/// Keeps patches scoring strictly above `threshold`.
pub fn flag_anomalies(scored: &[ScoredPatch], threshold: f64, heat_q: f64) -> Result<Vec<FlaggedPatch>> {
    scored
        .iter()
        .filter(|s| s.score > threshold)
        .map(|s| {
            let (h, w) = s.heatmap.shape();
            let values: Vec<f64> = s.heatmap.data.iter().map(|&v| v as f64).collect();
            let cut = nearest_rank(&values, heat_q)?;
            Ok(FlaggedPatch {
                patch: s.patch.clone(),
                score: s.score,
                hot: BinaryMask::from_fn(h, w, |r, c| s.heatmap.get(r, c) as f64 >= cut),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::BoundingBox;
    use crate::nn::gradient_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn patch(img: ImageBuffer, id: u32) -> PatchSample {
        PatchSample {
            image_id: "img".into(),
            sp_id: id,
            coverage: 1.0,
            bbox: BoundingBox { x0: 0, y0: 0, x1: 1, y1: 1 },
            image: img,
            defect_label: None,
        }
    }

    /// Smooth random shading with mild noise, a stand-in for blade surface.
    fn normal_patches(n: usize, size: usize, seed: u64) -> Vec<PatchSample> {
        let mut rng = stream_rng(seed, 3);
        (0..n)
            .map(|i| {
                let base: f32 = rng.random_range(0.3..0.7);
                let tilt: f32 = rng.random_range(-0.2..0.2);
                let mut data = Vec::with_capacity(size * size * 3);
                for r in 0..size {
                    for _ in 0..size {
                        let v = base + tilt * r as f32 / size as f32 + rng.random_range(-0.02..0.02);
                        data.extend_from_slice(&[v, v * 0.95, v * 0.9]);
                    }
                }
                patch(ImageBuffer::new(size, size, ColorSpace::Srgb, data).unwrap(), i as u32)
            })
            .collect()
    }

    fn small(kind: DetectorKind) -> DetectorConfig {
        DetectorConfig {
            kind,
            latent_dim: 8,
            patch_size: 16,
            base_channels: 4,
            epochs: 3,
            batch_size: 8,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_standard_normal(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!((kl_standard_normal(&[1.0, 0.0], &[0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_standard_normal(&[1.0], &[0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(v in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..10)) {
            let (mu, lv): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let kl = kl_standard_normal(&mu, &lv).unwrap();
            prop_assert!(kl >= 0.0);
            if mu.iter().chain(&lv).any(|&x| x.abs() > 1e-3) {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn nearest_rank_bounds(v in proptest::collection::vec(-100.0f64..100.0, 1..40), q in 0.01f64..0.99) {
            let t = calibrate_threshold(&v, q).unwrap();
            let below = v.iter().filter(|&&x| x <= t).count();
            prop_assert!(below as f64 >= q * v.len() as f64);
            prop_assert!(v.contains(&t));
        }
    }

    #[test]
    fn threshold_examples() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&scores, 0.95).unwrap(), 95.0);
        assert_eq!(calibrate_threshold(&[2.5; 7], 0.95).unwrap(), 2.5);
        assert_eq!(calibrate_threshold(&scores, 0.999).unwrap(), 100.0);
        assert!(calibrate_threshold(&scores, 1.0).is_err());
        assert!(calibrate_threshold(&[], 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DetectorConfig { lambda_latent: 1.5, ..DetectorConfig::default() }.validate().is_err());
        assert!(DetectorConfig { latent_dim: 0, ..DetectorConfig::default() }.validate().is_err());
        assert!(DetectorConfig { patch_size: 20, ..DetectorConfig::default() }.validate().is_err());
        let parsed: std::result::Result<DetectorConfig, _> = serde_json::from_str(r#"{"kind": "skip_ae", "bogus": 1}"#);
        assert!(parsed.is_err());
        let parsed: DetectorConfig = serde_json::from_str(r#"{"kind": "latent_residual"}"#).unwrap();
        assert_eq!(parsed.kind, DetectorKind::LatentResidual);
    }

    #[test]
    fn vae_gradient_matches_finite_differences() {
        let cfg = DetectorConfig {
            latent_dim: 2,
            patch_size: 8,
            base_channels: 2,
            ..DetectorConfig::default()
        };
        for kind in [DetectorKind::Vae, DetectorKind::LatentResidual, DetectorKind::SkipAe] {
            let model = Detector::new(&DetectorConfig { kind, ..cfg.clone() }, DType::F64).unwrap();
            let mut rng = stream_rng(5, 0);
            let data: Vec<f64> = (0..2 * 3 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec(data, (2, 3, 8, 8), &Device::Cpu).unwrap();
            let report = gradient_check(model.params(), || model.loss(&x, None), 1e-5).unwrap();
            assert!(report.worst < 1e-3, "{kind:?}: {report:?}");
        }
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let patches = normal_patches(12, 16, 1);
        let cfg = DetectorConfig { epochs: 0, ..small(DetectorKind::Vae) };
        let ckpt = train_detector(&patches, &cfg).unwrap();
        assert!(ckpt.training_log.is_empty());
        let fresh = Detector::new(&cfg, DType::F32).unwrap();
        assert_eq!(ckpt.model.params().export().unwrap(), fresh.params().export().unwrap());

        for kind in [DetectorKind::Vae, DetectorKind::LatentResidual, DetectorKind::SkipAe] {
            let cfg = DetectorConfig { adversarial: kind == DetectorKind::SkipAe, ..small(kind) };
            let a = train_detector(&patches, &cfg).unwrap();
            let b = train_detector(&patches, &cfg).unwrap();
            assert_eq!(a.training_log, b.training_log);
            let back = DetectorCheckpoint::from_bytes(&a.to_bytes().unwrap()).unwrap();
            assert_eq!(back.to_bytes().unwrap(), a.to_bytes().unwrap());
            assert_eq!(score(&back, &patches[0]).unwrap().score, score(&a, &patches[0]).unwrap().score);
        }
    }

    #[test]
    fn scoring_is_stateless() {
        let patches = normal_patches(16, 16, 2);
        let ckpt = train_detector(&patches, &small(DetectorKind::LatentResidual)).unwrap();
        let forward = score_all(&ckpt, &patches).unwrap();
        let mut reversed = patches.clone();
        reversed.reverse();
        let mut backward = score_all(&ckpt, &reversed).unwrap();
        backward.reverse();
        for (a, b) in forward.iter().zip(&backward) {
            assert_eq!(a.score, b.score);
            assert_eq!(a.heatmap, b.heatmap);
            assert!(a.heatmap.data.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn skip_ae_score_is_mean_residual() {
        let patches = normal_patches(8, 16, 4);
        let cfg = DetectorConfig { lambda_latent: 0.9, ..small(DetectorKind::SkipAe) };
        let ckpt = train_detector(&patches, &cfg).unwrap();
        let s = score(&ckpt, &patches[0]).unwrap();
        assert_eq!(s.score, s.heatmap.mean());
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let patches = normal_patches(4, 16, 4);
        let ckpt = train_detector(&patches, &DetectorConfig { epochs: 0, ..small(DetectorKind::Vae) }).unwrap();
        let wrong = normal_patches(1, 24, 4);
        assert!(matches!(score(&ckpt, &wrong[0]), Err(Error::Shape(_))));
        assert!(matches!(train_detector(&wrong, &small(DetectorKind::Vae)), Err(Error::Shape(_))));
        assert!(matches!(train_detector(&[], &small(DetectorKind::Vae)), Err(Error::Data(_))));
    }

    #[test]
    fn flagging() {
        let heat = ScalarMap::new(2, 2, vec![0.1, 0.4, 0.2, 0.3]).unwrap();
        let mk = |score: f64| ScoredPatch {
            patch: normal_patches(1, 8, 0).remove(0),
            score,
            heatmap: heat.clone(),
            latent: 0.0,
        };
        let scored = vec![mk(1.0), mk(3.0)];
        assert!(flag_anomalies(&[], 0.0, 0.95).unwrap().is_empty());
        assert!(flag_anomalies(&scored, 5.0, 0.95).unwrap().is_empty());
        assert_eq!(flag_anomalies(&scored, -1.0, 0.95).unwrap().len(), 2);
        let hot = flag_anomalies(&scored, 2.0, 0.75).unwrap();
        assert_eq!(hot.len(), 1);
        assert_eq!(hot[0].hot.bits(), &[false, true, false, true]);
    }
}
