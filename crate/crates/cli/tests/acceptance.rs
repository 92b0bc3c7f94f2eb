//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the verdict lines are always shown.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use bladescan_core::anodet::{kl_standard_normal, score_all, train_detector, Detector, DetectorCheckpoint, DetectorConfig, DetectorKind};
use bladescan_core::image::{mask_iou, rgb_to_lab, BinaryMask, ColorSpace, ImageBuffer, ScalarMap};
use bladescan_core::ingest::{stream_rng, TrainSample};
use bladescan_core::io::{read_mask_png, write_mask_png};
use bladescan_core::metrics::{average_precision, bootstrap_ci, roc_auc, Detection, TIMING_FIELDS};
use bladescan_core::morphology::{build_pseudo_gt, dilate, erode, open, PseudoGtConfig, StructuringElement};
use bladescan_core::nn::gradient_check;
use bladescan_core::pipeline::{instance_patches, label_instance_patches, PatchConfig};
use bladescan_core::records::{read_csv, write_csv, ScoreRow};
use bladescan_core::segnet::{
    bce_logits_loss, extract_blades, predict_mask, train_segmenter, BladeInstance, Checkpoint, ExtractConfig, SegNet,
    SegNetConfig, TrainHyper,
};
use bladescan_core::slic::{slic_segment, ClusterCenter, PatchSample, SlicConfig, SuperpixelMap};
use bladescan_core::synth::{synth_generate, SynthConfig, SynthScene};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

// ---------------------------------------------------------------- 1

fn random_element(rng: &mut ChaCha8Rng) -> StructuringElement {
    let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
    let anchor = (rng.random_range(0..h), rng.random_range(0..w));
    let mut bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.5)).collect();
    bits[anchor.0 * w + anchor.1] = true;
    StructuringElement::new(h, w, bits, anchor).unwrap()
}

fn element(i: usize, rng: &mut ChaCha8Rng) -> StructuringElement {
    match i % 6 {
        0 => StructuringElement::rect(3, 3),
        1 => StructuringElement::disk(1),
        2 => StructuringElement::disk(2),
        3 => StructuringElement::rect(1, 5),
        4 => StructuringElement::rect(2, 2),
        _ => random_element(rng),
    }
}

fn random_mask(rng: &mut ChaCha8Rng, keep: impl Fn(usize, usize) -> bool) -> BinaryMask {
    let p = rng.random_range(0.2..0.9);
    BinaryMask::from_fn(16, 16, |r, c| keep(r, c) && rng.random_bool(p))
}

fn morphology_laws() -> Outcome {
    let start = Instant::now();
    let mut rng = stream_rng(1, 0);
    let (mut idem, mut anti, mut adj) = (0, 0, 0);
    for i in 0..100 {
        let s = element(i, &mut rng);
        let m = random_mask(&mut rng, |_, _| true);
        let o = open(&m, &s);
        idem += (open(&o, &s) != o) as usize;
        anti += (!o.is_subset_of(&m)) as usize;
    }
    // Erosion treats the frame outside the mask as background, so the first
    // operand keeps its support at least one element reach inside the frame.
    let mut holds = 0;
    for i in 0..100 {
        let s = element(i, &mut rng);
        let reach = s.reach();
        let inner = |r: usize, c: usize| (reach..16 - reach).contains(&r) && (reach..16 - reach).contains(&c);
        let a = random_mask(&mut rng, inner);
        let grown = dilate(&a, &s);
        let b = match i % 3 {
            0 => grown.or(&random_mask(&mut rng, |_, _| true)).unwrap(),
            1 => {
                let mut b = grown.clone();
                let on: Vec<usize> = (0..256).filter(|&k| b.bits()[k]).collect();
                if !on.is_empty() {
                    let k = on[rng.random_range(0..on.len())];
                    b.set(k / 16, k % 16, false);
                }
                b
            }
            _ => random_mask(&mut rng, |_, _| true),
        };
        let lhs = grown.is_subset_of(&b);
        holds += lhs as usize;
        adj += (lhs != a.is_subset_of(&erode(&b, &s))) as usize;
    }
    let t = start.elapsed();
    outcome(
        idem + anti + adj == 0 && t < Duration::from_secs(5),
        format!(
            "violations: idempotence {idem}/100, anti-extensivity {anti}/100, adjunction {adj}/100 \
             ({holds} cases with inclusion true); {}",
            secs(t)
        ),
    )
}

// ---------------------------------------------------------------- 2

fn blocky_texture(seed: u64) -> ImageBuffer {
    let mut rng = stream_rng(seed, 0);
    let blocks: Vec<[f32; 3]> = (0..16).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let mut data = Vec::with_capacity(32 * 32 * 3);
    for r in 0..32 {
        for c in 0..32 {
            let n: f32 = rng.random_range(-0.02..0.02);
            data.extend(blocks[(r / 8) * 4 + c / 8].map(|v| (v + n).clamp(0.0, 1.0)));
        }
    }
    ImageBuffer::new(32, 32, ColorSpace::Srgb, data).unwrap()
}

fn d_s(lab: &ImageBuffer, r: usize, c: usize, k: &ClusterCenter, s: f64, m: f64) -> f64 {
    let p = lab.pixel(r, c);
    let dl = (p[0] as f64 - k.l).hypot(p[1] as f64 - k.a).hypot(p[2] as f64 - k.b);
    let dxy = (c as f64 - k.x).hypot(r as f64 - k.y);
    dl + m / s * dxy
}

/// Pixels whose assigned center is not beaten by any center whose window
/// covers them.
fn locally_optimal(lab: &ImageBuffer, map: &SuperpixelMap, m: f64) -> usize {
    let s = map.interval;
    let mut ok = 0;
    for r in 0..map.height {
        for c in 0..map.width {
            let own = d_s(lab, r, c, &map.centers[map.label(r, c) as usize], s, m);
            let beaten = map
                .centers
                .iter()
                .filter(|k| (r as f64 - k.y).abs() <= s && (c as f64 - k.x).abs() <= s)
                .any(|k| d_s(lab, r, c, k, s, m) < own);
            ok += (!beaten) as usize;
        }
    }
    ok
}

fn slic_oracle() -> Outcome {
    let start = Instant::now();
    let scenes = synth_generate(&SynthConfig {
        image_size: (32, 32),
        n_images: 20,
        n_negatives: 0,
        blade_width_range: (5.0, 9.0),
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut images: Vec<(&str, ImageBuffer)> = scenes.scenes.iter().map(|s| ("scenes", s.image.clone())).collect();
    images.extend((0..20).map(|s| ("textures", blocky_texture(s))));
    let (mut ok, mut total, mut partition_bad, mut count_bad) = (0, 0, 0, 0);
    let mut per_family: BTreeMap<(&str, usize), (usize, usize)> = BTreeMap::new();
    for n in [4, 9, 16] {
        let cfg = SlicConfig { n_clusters: n, ..SlicConfig::default() };
        for (family, img) in &images {
            let lab = rgb_to_lab(img).unwrap();
            let map = slic_segment(&lab, &cfg).unwrap();
            let k = map.len();
            let sizes = map.sizes();
            if map.labels.len() != 32 * 32 || map.labels.iter().any(|&l| l as usize >= k) || sizes.iter().any(|&s| s == 0) {
                partition_bad += 1;
            }
            if (k as f64 - n as f64).abs() > 0.3 * n as f64 {
                count_bad += 1;
            }
            let good = locally_optimal(&lab, &map, cfg.m);
            ok += good;
            total += 32 * 32;
            let e = per_family.entry((family, n)).or_default();
            e.0 += good;
            e.1 += 32 * 32;
        }
    }
    let t = start.elapsed();
    let frac = ok as f64 / total as f64;
    let breakdown: Vec<String> = per_family
        .iter()
        .map(|((f, n), (g, t))| format!("{f} n={n} {:.4}", *g as f64 / *t as f64))
        .collect();
    outcome(
        frac >= 0.99 && partition_bad == 0 && count_bad == 0 && t < Duration::from_secs(30),
        format!(
            "locally optimal {frac:.4} of {total} pixels (need 0.99) [{}]; partition failures {partition_bad}; \
             count outside ±30% {count_bad}; {}",
            breakdown.join(", "),
            secs(t)
        ),
    )
}

// ---------------------------------------------------------------- 3

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn metric_oracles() -> Outcome {
    let mut rng = stream_rng(3, 0);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(2..80);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        // coarse scores so that ties are common
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..12) as f64 / 4.0).collect();
        worst = worst.max((roc_auc(&scores, &labels).unwrap() - brute_auc(&scores, &labels)).abs());
    }

    // TP at rank 1, FP at rank 2, TP at rank 3 over two ground truths:
    // (1/1 + 2/3) / 2 = 5/6
    let rows = |a: usize, b: usize| BinaryMask::from_fn(10, 10, |r, _| (a..b).contains(&r));
    let mut gts = BTreeMap::new();
    gts.insert("a".to_string(), vec![rows(0, 3)]);
    gts.insert("b".to_string(), vec![rows(5, 9)]);
    let dets = [
        Detection::new("a", rows(0, 3), 0.9).unwrap(),
        Detection::new("a", rows(6, 7), 0.8).unwrap(),
        Detection::new("b", rows(5, 9), 0.7).unwrap(),
    ];
    let ap = average_precision(&dets, &gts, 0.5).unwrap();

    let target = BinaryMask::from_fn(4, 5, |r, c| (r + c) % 3 == 0);
    let bce = bce_logits_loss(&ScalarMap::zeros(4, 5), &target).unwrap();
    let kl = kl_standard_normal(&[0.0; 4], &[0.0; 4]).unwrap();

    let ok = [worst <= 1e-9, ap == 5.0 / 6.0, (bce - std::f64::consts::LN_2).abs() <= 1e-6, kl == 0.0];
    outcome(
        ok.iter().all(|&b| b),
        format!("AUC max error {worst:.2e} over 500; AP {ap} (5/6 = {}); bce(0) {bce:.9}; KL(0, 0) {kl}", 5.0 / 6.0),
    )
}

// ---------------------------------------------------------------- 4

fn gradient_checks() -> Outcome {
    let dev = Device::Cpu;
    let mut rng = stream_rng(4, 0);
    let seg_cfg = SegNetConfig { depth: 2, base_channels: 2, input_size: (8, 8), ..SegNetConfig::default() };
    let seg = SegNet::new(&seg_cfg, DType::F64, 3).unwrap();
    let xs: Vec<f64> = (0..2 * 3 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let ys: Vec<f64> = (0..2 * 64).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
    let x = Tensor::from_vec(xs, (2, 3, 8, 8), &dev).unwrap();
    let y = Tensor::from_vec(ys, (2, 1, 8, 8), &dev).unwrap();
    let seg_report = gradient_check(seg.params(), || seg.loss(&x, &y), 1e-6).unwrap();

    let det_cfg = DetectorConfig {
        kind: DetectorKind::Vae,
        latent_dim: 2,
        patch_size: 8,
        base_channels: 2,
        ..DetectorConfig::default()
    };
    let vae = Detector::new(&det_cfg, DType::F64).unwrap();
    let xs: Vec<f64> = (0..2 * 3 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(xs, (2, 3, 8, 8), &dev).unwrap();
    // the reparameterization noise is redrawn from the same seed on every
    // evaluation, which freezes it
    let vae_report = gradient_check(vae.params(), || vae.loss(&x, Some(&mut stream_rng(8, 0))), 1e-5).unwrap();

    outcome(
        seg_report.worst < 1e-3 && vae_report.worst < 1e-3,
        format!(
            "segmentation worst relative error {:.2e} over {} parameters; VAE {:.2e} over {}",
            seg_report.worst, seg_report.checked, vae_report.worst, vae_report.checked
        ),
    )
}

// ---------------------------------------------------------------- 5

fn instances(model: &SegNet, scene: &SynthScene) -> Vec<BladeInstance> {
    let raw = predict_mask(model, &scene.image, None).unwrap();
    extract_blades(&scene.image, &raw, &ExtractConfig::default()).unwrap()
}

fn segmentation() -> (Outcome, Checkpoint) {
    let start = Instant::now();
    let data = synth_generate(&SynthConfig { n_images: 40, n_negatives: 10, seed: 11, ..SynthConfig::default() }).unwrap();
    let mut samples: Vec<TrainSample> = data
        .scenes
        .iter()
        .map(|s| {
            let pgt = build_pseudo_gt(&s.image, &PseudoGtConfig::default()).unwrap();
            TrainSample::positive(s.image.clone(), pgt.mask).unwrap()
        })
        .collect();
    samples.extend(data.negatives.iter().cloned().map(TrainSample::negative));
    let cfg = SegNetConfig::default();
    let hyper = TrainHyper { seed: 3, ..TrainHyper::desk() };
    let ckpt = train_segmenter(&samples, &cfg, &hyper).unwrap();
    let train_time = start.elapsed();

    let held = synth_generate(&SynthConfig { n_images: 50, n_negatives: 0, seed: 999, ..SynthConfig::default() }).unwrap();
    let mut dets = Vec::new();
    let mut gts = BTreeMap::new();
    let mut ious = Vec::new();
    for s in &held.scenes {
        let found = instances(&ckpt.model, s);
        ious.push(found.iter().map(|i| mask_iou(&i.mask, &s.blade_mask).unwrap()).fold(0.0, f64::max));
        dets.extend(found.iter().map(|i| Detection::from_instance(s.id.clone(), i)));
        gts.insert(s.id.clone(), vec![s.blade_mask.clone()]);
    }
    let mean_iou = ious.iter().sum::<f64>() / ious.len() as f64;
    let ap = average_precision(&dets, &gts, 0.5).unwrap();
    let t = start.elapsed();
    let desk = hyper.epochs <= 40 && cfg.base_channels == 16;
    (
        outcome(
            mean_iou >= 0.85 && ap >= 0.9 && desk && t < Duration::from_secs(15 * 60),
            format!(
                "mean IoU {mean_iou:.4} (need 0.85), AP@0.5 {ap:.4} (need 0.90) on 50 held-out scenes; \
                 {} epochs, base_channels {}, training {}, total {}",
                hyper.epochs,
                cfg.base_channels,
                secs(train_time),
                secs(t)
            ),
        ),
        ckpt,
    )
}

// ---------------------------------------------------------------- 6

fn scene_patches(model: &SegNet, scenes: &[SynthScene], slic: &SlicConfig, patch_size: usize) -> Vec<PatchSample> {
    let pc = PatchConfig::default();
    let mut out = Vec::new();
    for s in scenes {
        let (h, w) = s.image.shape();
        let defects = s.defects.iter().fold(BinaryMask::empty(h, w), |acc, d| acc.or(&d.mask).unwrap());
        for (k, inst) in instances(model, s).iter().enumerate() {
            let mut ip = instance_patches(inst, &format!("{}_b{k}", s.id), slic, &pc, patch_size).unwrap();
            label_instance_patches(&mut ip, inst, &defects, pc.defect_min_fraction).unwrap();
            out.extend(ip.patches);
        }
    }
    out
}

fn anomaly_detection(seg: &Checkpoint) -> (Outcome, Vec<DetectorCheckpoint>) {
    let start = Instant::now();
    let slic = SlicConfig { n_clusters: 20, ..SlicConfig::default() };
    let patch_size = 32;
    let normal_scenes = synth_generate(&SynthConfig { n_images: 60, n_negatives: 0, defect_rate: 0.0, seed: 100, ..SynthConfig::default() }).unwrap();
    let train = scene_patches(&seg.model, &normal_scenes.scenes, &slic, patch_size);
    let n_defective_train = train.iter().filter(|p| p.defect_label == Some(true)).count();
    let mixed = synth_generate(&SynthConfig { n_images: 60, n_negatives: 0, defect_rate: 0.7, seed: 200, ..SynthConfig::default() }).unwrap();
    let held = scene_patches(&seg.model, &mixed.scenes, &slic, patch_size);
    let labels: Vec<bool> = held.iter().map(|p| p.defect_label == Some(true)).collect();
    let n_pos = labels.iter().filter(|&&l| l).count();

    let mut lines = Vec::new();
    let mut any = false;
    let mut ckpts = Vec::new();
    for kind in [DetectorKind::Vae, DetectorKind::LatentResidual, DetectorKind::SkipAe] {
        let cfg = DetectorConfig { kind, patch_size, ..DetectorConfig::default() };
        let ckpt = train_detector(&train, &cfg).unwrap();
        let scores: Vec<f64> = score_all(&ckpt, &held).unwrap().iter().map(|s| s.score).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        let ci = bootstrap_ci(&scores, &labels, 1000, 0.95, 0).unwrap();
        any |= auc >= 0.85 && ci.low >= 0.75;
        lines.push(format!("{} AUC {auc:.4} CI [{:.4}, {:.4}]", kind.name(), ci.low, ci.high));
        ckpts.push(ckpt);
    }
    let t = start.elapsed();
    (
        outcome(
            any && train.len() >= 200 && n_defective_train == 0 && t < Duration::from_secs(15 * 60),
            format!(
                "{} defect-free training patches; held-out {} patches ({n_pos} defective); {}; {}",
                train.len(),
                held.len(),
                lines.join("; "),
                secs(t)
            ),
        ),
        ckpts,
    )
}

// ---------------------------------------------------------------- 7

const DETERMINISM_CONFIG: &str = r#"{
  "synth": {"n_images": 24, "n_negatives": 4, "defect_rate": 0.8},
  "data": {"test_fraction": 0.25},
  "train": {"epochs": 15},
  "detector": {"epochs": 5},
  "eval": {"n_resamples": 200, "warmup": 0}
}"#;

fn run_stages(dir: &Path, config: &Path) -> Result<(), String> {
    for stage in ["synth", "pseudo-gt", "train-seg", "extract", "slic", "train-ad", "evaluate"] {
        let status = Command::new(env!("CARGO_BIN_EXE_bladescan"))
            .args(["--seed", "17", "--config"])
            .arg(config)
            .arg("--out-dir")
            .arg(dir)
            .arg(stage)
            .env("RUST_LOG", "warn")
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("{stage} exited with {status}"));
        }
    }
    Ok(())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn report_without_timing(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    for f in TIMING_FIELDS {
        v.as_object_mut().unwrap().remove(f);
    }
    v
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    std::fs::write(&config, DETERMINISM_CONFIG).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        if let Err(e) = run_stages(dir, &config) {
            return outcome(false, e);
        }
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    if fa != fb {
        return outcome(false, format!("file sets differ: {} vs {} files", fa.len(), fb.len()));
    }
    let mut differing = Vec::new();
    for rel in &fa {
        let same = if rel == Path::new("report.json") {
            report_without_timing(&a.join(rel)) == report_without_timing(&b.join(rel))
        } else {
            std::fs::read(a.join(rel)).unwrap() == std::fs::read(b.join(rel)).unwrap()
        };
        if !same {
            differing.push(rel.display().to_string());
        }
    }
    let required = ["dataset/index.json", "segnet_log.json", "detector_log.json", "blades.json", "patches.csv", "scores.csv", "report.json"];
    let missing: Vec<&str> = required.iter().copied().filter(|r| !fa.iter().any(|f| f == Path::new(r))).collect();
    outcome(
        differing.is_empty() && missing.is_empty(),
        format!(
            "{} files compared across two runs (report.json without {:?}); differing {:?}; missing {:?}",
            fa.len(),
            TIMING_FIELDS,
            differing,
            missing
        ),
    )
}

// ---------------------------------------------------------------- 8

fn same_bytes(a: &Path, b: &Path) -> bool {
    std::fs::read(a).unwrap() == std::fs::read(b).unwrap()
}

fn round_trips(seg: &Checkpoint, detectors: &[DetectorCheckpoint]) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let p = |name: &str| tmp.path().join(name);
    let mut results = Vec::new();

    let mut rng = stream_rng(8, 0);
    let mask = BinaryMask::from_fn(37, 23, |_, _| rng.random_bool(0.3));
    write_mask_png(&p("m1.png"), &mask).unwrap();
    let back = read_mask_png(&p("m1.png")).unwrap();
    write_mask_png(&p("m2.png"), &back).unwrap();
    results.push(("mask PNG", back == mask && same_bytes(&p("m1.png"), &p("m2.png"))));

    let cfg = SlicConfig { n_clusters: 9, ..SlicConfig::default() };
    let map = slic_segment(&rgb_to_lab(&blocky_texture(4)).unwrap(), &cfg).unwrap();
    map.save(&p("l1.png"), &p("l1.json"), &cfg).unwrap();
    let (back, back_cfg) = SuperpixelMap::load(&p("l1.png"), &p("l1.json")).unwrap();
    back.save(&p("l2.png"), &p("l2.json"), &back_cfg).unwrap();
    results.push((
        "superpixel labels + sidecar",
        back == map && same_bytes(&p("l1.png"), &p("l2.png")) && same_bytes(&p("l1.json"), &p("l2.json")),
    ));

    seg.save(&p("s1.ckpt")).unwrap();
    Checkpoint::load(&p("s1.ckpt")).unwrap().save(&p("s2.ckpt")).unwrap();
    let mut ckpt_ok = same_bytes(&p("s1.ckpt"), &p("s2.ckpt"));
    for d in detectors {
        d.save(&p("d1.ckpt")).unwrap();
        DetectorCheckpoint::load(&p("d1.ckpt")).unwrap().save(&p("d2.ckpt")).unwrap();
        ckpt_ok &= same_bytes(&p("d1.ckpt"), &p("d2.ckpt"));
    }
    results.push(("checkpoint archives", ckpt_ok));

    let rows: Vec<ScoreRow> = (0..50)
        .map(|i| ScoreRow {
            image_id: format!("scene_{i:04}_b{}", i % 3),
            sp_id: rng.random_range(0..400),
            score: match i % 5 {
                0 => 1.0 / 3.0,
                1 => 1e-300 * i as f64,
                2 => -rng.random::<f64>() * 1e12,
                _ => rng.random(),
            },
            flagged: rng.random_bool(0.5),
            heatmap_scale: rng.random::<f32>() * 7.0,
        })
        .collect();
    write_csv(&p("c1.csv"), &rows).unwrap();
    let back: Vec<ScoreRow> = read_csv(&p("c1.csv")).unwrap();
    write_csv(&p("c2.csv"), &back).unwrap();
    results.push(("scores CSV", back == rows && same_bytes(&p("c1.csv"), &p("c2.csv"))));

    let failed: Vec<&str> = results.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    outcome(
        failed.is_empty(),
        format!(
            "{} formats, {} checkpoints; failures {failed:?}",
            results.len(),
            1 + detectors.len()
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters are accepted but ignored.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut verdicts = Vec::new();
    let mut report = |n: usize, name: &str, o: Outcome, t: Duration| {
        println!(
            "criterion {n}: {} {name} ({}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            secs(t),
            o.detail
        );
        verdicts.push((n, o.pass));
    };
    let timed = |f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed())
    };

    let (o, t) = timed(&mut morphology_laws);
    report(1, "morphology laws", o, t);
    let (o, t) = timed(&mut slic_oracle);
    report(2, "SLIC oracle", o, t);
    let (o, t) = timed(&mut metric_oracles);
    report(3, "metric oracles", o, t);
    let (o, t) = timed(&mut gradient_checks);
    report(4, "gradient checks", o, t);

    let t0 = Instant::now();
    let (o, seg) = segmentation();
    report(5, "synthetic segmentation", o, t0.elapsed());
    let t0 = Instant::now();
    let (o, detectors) = anomaly_detection(&seg);
    report(6, "synthetic anomaly detection", o, t0.elapsed());

    let (o, t) = timed(&mut determinism);
    report(7, "determinism", o, t);
    let (o, t) = timed(&mut || round_trips(&seg, &detectors));
    report(8, "format round-trips", o, t);

    let failed: Vec<usize> = verdicts.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        verdicts.len() - failed.len(),
        verdicts.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
