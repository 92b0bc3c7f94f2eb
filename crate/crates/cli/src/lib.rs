//! Pipeline stages behind the `bladescan` command. Each stage reads the
//! outputs of earlier stages from the output directory and writes its own.
//!
//! Layout under the output directory:
//!
//! ```text
//! dataset/                 synth output (index.json, positives/, ...)
//! dataset/positives/*.pgt.png  pseudo ground truth
//! segnet.ckpt, segnet_log.json
//! blades.json, blades/     extracted instances
//! superpixels/, patches/, patches.csv
//! detector.ckpt, detector_log.json, calibration.json
//! scores.csv, heatmaps/
//! report.json
//! overlays/
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bladescan_core::anodet::{calibrate_threshold, score_all, train_detector, DetectorCheckpoint, ScoredPatch};
use bladescan_core::config::PipelineConfig;
use bladescan_core::image::{BinaryMask, BoundingBox, ColorSpace, Connectivity, ImageBuffer, ScalarMap};
use bladescan_core::ingest::{image_id, rescale, sample_negatives, split_dataset, DatasetIndex, TrainSample};
use bladescan_core::io::{read_image_png, read_json, read_mask_png, write_heatmap_png, write_image_png, write_json, write_mask_png};
use bladescan_core::metrics::{
    average_precision_with, bootstrap_ci, config_digest, roc_auc, time_inference, Detection, EvalReport, IouKind,
};
use bladescan_core::morphology::build_pseudo_gt;
use bladescan_core::overlay::{draw_box, label_color, render_overlay, Layer};
use bladescan_core::pipeline::{instance_patches, label_instance_patches, split_instances, InstancePatches};
use bladescan_core::records::{patch_file_name, read_csv, write_csv, PatchRow, ScoreRow};
use bladescan_core::segnet::{extract_blades, predict_mask, train_segmenter, BladeInstance, Checkpoint};
use bladescan_core::slic::{PatchSample, SuperpixelMap};
use bladescan_core::synth::{synth_generate, write_dataset};
use bladescan_core::{Error, Result};

pub const DATASET_DIR: &str = "dataset";
pub const SEGNET_CKPT: &str = "segnet.ckpt";
pub const SEGNET_LOG: &str = "segnet_log.json";
pub const BLADES_JSON: &str = "blades.json";
pub const PATCHES_CSV: &str = "patches.csv";
pub const DETECTOR_CKPT: &str = "detector.ckpt";
pub const DETECTOR_LOG: &str = "detector_log.json";
pub const CALIBRATION_JSON: &str = "calibration.json";
pub const SCORES_CSV: &str = "scores.csv";
pub const REPORT_JSON: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One extracted blade instance in `blades.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BladeRecord {
    pub instance_id: String,
    /// Source image, relative to the dataset root.
    pub source: String,
    pub split: Split,
    pub bbox: BoundingBox,
    pub crop_box: BoundingBox,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub quantile: f64,
    /// Held-out normal patches the quantile was taken over.
    pub n_scores: usize,
}

pub struct Workspace {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
}

impl Workspace {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>) -> Self {
        Self { cfg, out: out.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn dataset(&self) -> PathBuf {
        self.out.join(DATASET_DIR)
    }

    fn index(&self) -> Result<DatasetIndex> {
        DatasetIndex::load(&self.dataset())
    }

    fn load_image(&self, rel: &str) -> Result<ImageBuffer> {
        rescale(&read_image_png(&self.dataset().join(rel))?, self.cfg.data.rescale)
    }

    fn load_mask(&self, rel: &str) -> Result<BinaryMask> {
        let mask = read_mask_png(&self.dataset().join(rel))?;
        if self.cfg.data.rescale == 1.0 {
            return Ok(mask);
        }
        let (h, w) = mask.shape();
        let gray = ImageBuffer::new(h, w, ColorSpace::Gray, mask.bits().iter().map(|&b| b as u8 as f32).collect())?;
        let scaled = rescale(&gray, self.cfg.data.rescale)?;
        let (sh, sw) = scaled.shape();
        BinaryMask::new(sh, sw, scaled.data().iter().map(|&v| v >= 0.5).collect())
    }

    /// `(train, test)` positives under the index's split seed.
    fn split(&self, idx: &DatasetIndex) -> Result<(Vec<String>, Vec<String>)> {
        idx.split_positives(self.cfg.data.test_fraction)
    }

    fn defects_of(&self, idx: &DatasetIndex, rel: &str, shape: (usize, usize)) -> Result<Option<BinaryMask>> {
        let Some(records) = idx.defects.get(rel) else { return Ok(None) };
        let mut union = BinaryMask::empty(shape.0, shape.1);
        for d in records {
            union = union.or(&self.load_mask(&d.mask)?)?;
        }
        Ok(Some(union))
    }

    fn blades(&self) -> Result<Vec<BladeRecord>> {
        read_json(&self.path(BLADES_JSON))
    }

    fn instance(&self, rec: &BladeRecord) -> Result<BladeInstance> {
        let src = self.load_image(&rec.source)?;
        let mask = read_mask_png(&self.path(&format!("blades/{}.mask.png", rec.instance_id)))?;
        let zero = vec![0.0f32; src.channels()];
        Ok(BladeInstance {
            crop: src.masked(&mask, &zero)?.crop(rec.crop_box).with_source(image_id(&rec.source)),
            mask,
            bbox: rec.bbox,
            crop_box: rec.crop_box,
            confidence: rec.confidence,
        })
    }
}

fn pgt_path(rel: &str) -> String {
    match rel.strip_suffix(".png") {
        Some(stem) => format!("{stem}.pgt.png"),
        None => format!("{rel}.pgt.png"),
    }
}

/// Renders the synthetic dataset into `dataset/`.
pub fn synth(ws: &Workspace) -> Result<DatasetIndex> {
    let data = synth_generate(&ws.cfg.synth)?;
    let idx = write_dataset(&ws.dataset(), &data, ws.cfg.synth.seed)?;
    log::info!("wrote {} positives and {} negatives", idx.positives.len(), idx.negatives.len());
    Ok(idx)
}

/// Writes `<name>.pgt.png` beside every positive. Returns the number of
/// degenerate (single-class) images.
pub fn pseudo_gt(ws: &Workspace) -> Result<usize> {
    let idx = ws.index()?;
    let mut degenerate = 0;
    for rel in &idx.positives {
        let pgt = build_pseudo_gt(&ws.load_image(rel)?, &ws.cfg.pseudo_gt)?;
        degenerate += pgt.degenerate as usize;
        write_mask_png(&ws.dataset().join(pgt_path(rel)), &pgt.mask)?;
    }
    if degenerate > 0 {
        log::warn!("{degenerate} images gave degenerate pseudo ground truth");
    }
    Ok(degenerate)
}

/// Trains the segmenter on training-split positives with their pseudo ground
/// truth, plus negatives.
pub fn train_seg(ws: &Workspace) -> Result<Checkpoint> {
    let idx = ws.index()?;
    let (train, _) = ws.split(&idx)?;
    let mut samples = Vec::with_capacity(train.len() + idx.negatives.len());
    for rel in &train {
        let target_rel = pgt_path(rel);
        if !ws.dataset().join(&target_rel).is_file() {
            return Err(Error::Data(format!("{target_rel} is missing; run pseudo-gt first")));
        }
        samples.push(TrainSample::positive(ws.load_image(rel)?, ws.load_mask(&target_rel)?)?);
    }
    match ws.cfg.data.negatives {
        Some(n) => {
            for s in sample_negatives(&idx, &ws.dataset(), n, ws.cfg.train.seed)? {
                samples.push(TrainSample::negative(rescale(&s.image, ws.cfg.data.rescale)?));
            }
        }
        None => {
            for rel in &idx.negatives {
                samples.push(TrainSample::negative(ws.load_image(rel)?));
            }
        }
    }
    let ckpt = train_segmenter(&samples, &ws.cfg.segnet, &ws.cfg.train)?;
    ckpt.save(&ws.path(SEGNET_CKPT))?;
    write_json(&ws.path(SEGNET_LOG), &ckpt.training_log)?;
    Ok(ckpt)
}

fn predict_instances(ckpt: &Checkpoint, ws: &Workspace, img: &ImageBuffer) -> Result<Vec<BladeInstance>> {
    let raw = predict_mask(&ckpt.model, img, ws.cfg.extract.stride)?;
    extract_blades(img, &raw, &ws.cfg.extract)
}

/// Runs the segmenter over every positive and stores one crop and mask per
/// blade instance.
pub fn extract(ws: &Workspace) -> Result<Vec<BladeRecord>> {
    let idx = ws.index()?;
    let ckpt = Checkpoint::load(&ws.path(SEGNET_CKPT))?;
    let (_, test) = ws.split(&idx)?;
    let mut records = Vec::new();
    for rel in &idx.positives {
        let img = ws.load_image(rel)?;
        let split = if test.contains(rel) { Split::Test } else { Split::Train };
        for (k, inst) in predict_instances(&ckpt, ws, &img)?.into_iter().enumerate() {
            let instance_id = format!("{}_b{k}", image_id(rel));
            write_image_png(&ws.path(&format!("blades/{instance_id}.png")), &inst.crop)?;
            write_mask_png(&ws.path(&format!("blades/{instance_id}.mask.png")), &inst.mask)?;
            records.push(BladeRecord {
                instance_id,
                source: rel.clone(),
                split,
                bbox: inst.bbox,
                crop_box: inst.crop_box,
                confidence: inst.confidence,
            });
        }
    }
    write_json(&ws.path(BLADES_JSON), &records)?;
    log::info!("{} blade instances from {} images", records.len(), idx.positives.len());
    Ok(records)
}

fn instance_superpixels(ws: &Workspace, idx: &DatasetIndex, rec: &BladeRecord) -> Result<InstancePatches> {
    let inst = ws.instance(rec)?;
    let mut ip = instance_patches(&inst, &rec.instance_id, &ws.cfg.slic, &ws.cfg.patches, ws.cfg.detector.patch_size)?;
    if let Some(defects) = ws.defects_of(idx, &rec.source, inst.mask.shape())? {
        label_instance_patches(&mut ip, &inst, &defects, ws.cfg.patches.defect_min_fraction)?;
    }
    Ok(ip)
}

/// Superpixels and patches for every extracted instance.
pub fn slic(ws: &Workspace) -> Result<Vec<PatchRow>> {
    let idx = ws.index()?;
    let mut rows = Vec::new();
    for rec in ws.blades()? {
        let ip = instance_superpixels(ws, &idx, &rec)?;
        let id = &rec.instance_id;
        ip.spmap.save(
            &ws.path(&format!("superpixels/{id}.png")),
            &ws.path(&format!("superpixels/{id}.json")),
            &ws.cfg.slic,
        )?;
        for p in &ip.patches {
            write_image_png(&ws.path(&format!("patches/{}", patch_file_name(id, p.sp_id))), &p.image)?;
            rows.push(PatchRow {
                image_id: p.image_id.clone(),
                sp_id: p.sp_id,
                coverage: p.coverage,
                defect_label: p.defect_label,
            });
        }
    }
    write_csv(&ws.path(PATCHES_CSV), &rows)?;
    log::info!("{} patches", rows.len());
    Ok(rows)
}

fn load_patches(ws: &Workspace, split: Split) -> Result<Vec<PatchSample>> {
    let splits: BTreeMap<String, Split> = ws.blades()?.into_iter().map(|b| (b.instance_id, b.split)).collect();
    let size = ws.cfg.detector.patch_size;
    let mut out = Vec::new();
    for row in read_csv::<PatchRow>(&ws.path(PATCHES_CSV))? {
        let Some(&s) = splits.get(&row.image_id) else {
            return Err(Error::Data(format!("patch of unknown instance {}", row.image_id)));
        };
        if s != split {
            continue;
        }
        let image = read_image_png(&ws.path(&format!("patches/{}", patch_file_name(&row.image_id, row.sp_id))))?;
        out.push(PatchSample {
            image_id: row.image_id,
            sp_id: row.sp_id,
            coverage: row.coverage,
            // the source box is not kept on disk
            bbox: BoundingBox { x0: 0, y0: 0, x1: size, y1: size },
            image,
            defect_label: row.defect_label,
        });
    }
    Ok(out)
}

/// Trains the anomaly scorer on defect-free training patches and calibrates
/// the flagging threshold on a held-out fifth of them.
pub fn train_ad(ws: &Workspace) -> Result<(DetectorCheckpoint, Calibration)> {
    let normal: Vec<PatchSample> = load_patches(ws, Split::Train)?
        .into_iter()
        .filter(|p| p.defect_label != Some(true))
        .collect();
    let (fit, held) = split_dataset(&normal, ws.cfg.data.test_fraction, ws.cfg.detector.seed)
        .map_err(|_| Error::Data(format!("{} normal patches are too few to train on", normal.len())))?;
    let ckpt = train_detector(&fit, &ws.cfg.detector)?;
    let scores: Vec<f64> = score_all(&ckpt, &held)?.iter().map(|s| s.score).collect();
    let q = ws.cfg.eval.calibration_quantile;
    let cal = Calibration {
        threshold: calibrate_threshold(&scores, q)?,
        quantile: q,
        n_scores: scores.len(),
    };
    ckpt.save(&ws.path(DETECTOR_CKPT))?;
    write_json(&ws.path(DETECTOR_LOG), &ckpt.training_log)?;
    write_json(&ws.path(CALIBRATION_JSON), &cal)?;
    log::info!("trained on {} patches, threshold {:.4}", fit.len(), cal.threshold);
    Ok((ckpt, cal))
}

/// Scores test-split patches, writing `scores.csv` and one heatmap per patch.
pub fn score(ws: &Workspace) -> Result<(Vec<ScoredPatch>, Vec<ScoreRow>)> {
    let ckpt = DetectorCheckpoint::load(&ws.path(DETECTOR_CKPT))?;
    let cal: Calibration = read_json(&ws.path(CALIBRATION_JSON))?;
    let scored = score_all(&ckpt, &load_patches(ws, Split::Test)?)?;
    let mut rows = Vec::with_capacity(scored.len());
    for s in &scored {
        let name = patch_file_name(&s.patch.image_id, s.patch.sp_id);
        let heatmap_scale = write_heatmap_png(&ws.path(&format!("heatmaps/{name}")), &s.heatmap)?;
        rows.push(ScoreRow {
            image_id: s.patch.image_id.clone(),
            sp_id: s.patch.sp_id,
            score: s.score,
            flagged: s.score > cal.threshold,
            heatmap_scale,
        });
    }
    write_csv(&ws.path(SCORES_CSV), &rows)?;
    Ok((scored, rows))
}

/// Segmentation AP and mean IoU on test-split images, anomaly AUC with its
/// bootstrap interval on test-split patches, and per-image timing.
pub fn evaluate(ws: &Workspace) -> Result<EvalReport> {
    let cfg = &ws.cfg;
    let idx = ws.index()?;
    let (_, test) = ws.split(&idx)?;
    let ckpt = Checkpoint::load(&ws.path(SEGNET_CKPT))?;
    let images: Vec<(String, ImageBuffer)> =
        test.iter().map(|rel| Ok((rel.clone(), ws.load_image(rel)?))).collect::<Result<_>>()?;
    let mut dets = Vec::new();
    let mut gts = BTreeMap::new();
    let mut ious = Vec::new();
    for (rel, img) in &images {
        let Some(gt_rel) = idx.annotations.get(rel) else {
            return Err(Error::Data(format!("{rel} has no annotation to evaluate against")));
        };
        let gt = ws.load_mask(gt_rel)?;
        let found = predict_instances(&ckpt, ws, img)?;
        let best = found
            .iter()
            .map(|i| bladescan_core::image::mask_iou(&i.mask, &gt))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        ious.push(best);
        dets.extend(found.iter().map(|i| Detection::from_instance(rel.clone(), i)));
        gts.insert(rel.clone(), split_instances(&gt, Connectivity::Eight));
    }
    let t = cfg.eval.iou_threshold;
    let ap = average_precision_with(&dets, &gts, t, IouKind::Mask)?;
    let ap_box = average_precision_with(&dets, &gts, t, IouKind::Box)?;
    let n_gt: usize = gts.values().map(Vec::len).sum();
    let ap_note = match (n_gt, dets.len()) {
        (0, 0) => Some("no ground truth and no detections: AP = 1 by convention".to_string()),
        (0, _) => Some("no ground truth: AP = 0 by convention".to_string()),
        _ => None,
    };
    let timing = time_inference(|(_, img): &(String, ImageBuffer)| predict_instances(&ckpt, ws, img), &images, cfg.eval.warmup)?;

    let (_, rows) = score(ws)?;
    let labels_by_patch: BTreeMap<(String, u32), Option<bool>> = read_csv::<PatchRow>(&ws.path(PATCHES_CSV))?
        .into_iter()
        .map(|r| ((r.image_id, r.sp_id), r.defect_label))
        .collect();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for r in &rows {
        if let Some(Some(l)) = labels_by_patch.get(&(r.image_id.clone(), r.sp_id)) {
            scores.push(r.score);
            labels.push(*l);
        }
    }
    let auc = roc_auc(&scores, &labels)?;
    let ci = bootstrap_ci(&scores, &labels, cfg.eval.n_resamples, cfg.eval.ci_level, cfg.eval.seed)?;
    let cal: Calibration = read_json(&ws.path(CALIBRATION_JSON))?;
    let report = EvalReport {
        ap,
        ap_box,
        iou_threshold: t,
        mean_iou: if ious.is_empty() { 0.0 } else { ious.iter().sum::<f64>() / ious.len() as f64 },
        n_images: images.len(),
        n_detections: dets.len(),
        ap_note,
        detector: cfg.detector.kind.name().to_string(),
        auc,
        ci_low: ci.low,
        ci_high: ci.high,
        ci_level: cfg.eval.ci_level,
        n_resamples: cfg.eval.n_resamples,
        ci_redraws: ci.redraws,
        n_patches: scores.len(),
        n_anomalous: labels.iter().filter(|&&l| l).count(),
        threshold: cfg.extract.threshold,
        anomaly_threshold: cal.threshold,
        n_flagged: rows.iter().filter(|r| r.flagged).count(),
        per_image_ms: timing.mean_ms,
        per_image_ms_std: timing.std_ms,
        config_digest: config_digest(cfg)?,
    };
    write_json(&ws.path(REPORT_JSON), &report)?;
    Ok(report)
}

/// One overlay per test image: instance masks and boxes, superpixel
/// boundaries, and flagged superpixels shaded by score.
pub fn overlay(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let blades = ws.blades()?;
    let scores: BTreeMap<(String, u32), ScoreRow> = read_csv::<ScoreRow>(&ws.path(SCORES_CSV))?
        .into_iter()
        .map(|r| ((r.image_id.clone(), r.sp_id), r))
        .collect();
    let max_score = scores.values().map(|r| r.score).fold(0.0, f64::max);
    let mut by_source: BTreeMap<&str, Vec<&BladeRecord>> = BTreeMap::new();
    for b in blades.iter().filter(|b| b.split == Split::Test) {
        by_source.entry(&b.source).or_default().push(b);
    }
    let mut written = Vec::new();
    for (source, recs) in by_source {
        let img = ws.load_image(source)?;
        let mut masks = Vec::new();
        let mut maps = Vec::new();
        let mut heats = Vec::new();
        for (k, rec) in recs.iter().enumerate() {
            masks.push((read_mask_png(&ws.path(&format!("blades/{}.mask.png", rec.instance_id)))?, k as u32));
            let id = &rec.instance_id;
            let (map, _) = SuperpixelMap::load(
                &ws.path(&format!("superpixels/{id}.png")),
                &ws.path(&format!("superpixels/{id}.json")),
            )?;
            let mut heat = ScalarMap::zeros(map.height, map.width);
            for (i, &l) in map.labels.iter().enumerate() {
                if let Some(r) = scores.get(&(id.clone(), l)).filter(|r| r.flagged && max_score > 0.0) {
                    heat.data[i] = (r.score / max_score) as f32;
                }
            }
            let at = (rec.crop_box.y0, rec.crop_box.x0);
            maps.push((map, at));
            heats.push((heat, at));
        }
        let mut layers: Vec<Layer> = masks.iter().map(|(m, id)| Layer::Mask { mask: m, id: *id }).collect();
        layers.extend(maps.iter().map(|(map, at)| Layer::Boundaries { map, at: *at }));
        layers.extend(heats.iter().map(|(map, at)| Layer::Heat { map, at: *at }));
        let mut out = render_overlay(&img, &layers, &ws.cfg.overlay)?;
        for (k, rec) in recs.iter().enumerate() {
            draw_box(&mut out, rec.bbox, label_color(k as u32))?;
        }
        let path = ws.path(&format!("overlays/{}.png", image_id(source)));
        write_image_png(&path, &out)?;
        written.push(path);
    }
    Ok(written)
}

/// Every stage in order.
pub fn run_all(ws: &Workspace) -> Result<EvalReport> {
    synth(ws)?;
    pseudo_gt(ws)?;
    train_seg(ws)?;
    extract(ws)?;
    slic(ws)?;
    train_ad(ws)?;
    let report = evaluate(ws)?;
    overlay(ws)?;
    Ok(report)
}

/// Reads the effective configuration: defaults, then the optional file, then
/// the seed override.
pub fn effective_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}
