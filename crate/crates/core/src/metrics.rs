//! Detection and ranking metrics, bootstrap intervals, timing and the
//! evaluation report.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anodet::nearest_rank;
use crate::error::{Error, Result};
use crate::image::{mask_iou, BinaryMask, BoundingBox};
use crate::ingest::stream_rng;
use crate::segnet::BladeInstance;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub mask: BinaryMask,
    /// Tight box around `mask`.
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl Detection {
    pub fn new(image_id: impl Into<String>, mask: BinaryMask, confidence: f64) -> Result<Self> {
        let bbox = mask
            .bounding_box()
            .ok_or_else(|| Error::Data("detection with an empty mask".into()))?;
        if !confidence.is_finite() {
            return Err(Error::Parameter(format!("confidence {confidence} is not finite")));
        }
        Ok(Self {
            image_id: image_id.into(),
            mask,
            bbox,
            confidence,
        })
    }

    pub fn from_instance(image_id: impl Into<String>, inst: &BladeInstance) -> Self {
        Self {
            image_id: image_id.into(),
            mask: inst.mask.clone(),
            bbox: inst.bbox,
            confidence: inst.confidence,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouKind {
    Mask,
    Box,
}

/// AP with mask IoU. See [`average_precision_with`].
pub fn average_precision(dets: &[Detection], gts: &BTreeMap<String, Vec<BinaryMask>>, iou_t: f64) -> Result<f64> {
    average_precision_with(dets, gts, iou_t, IouKind::Mask)
}

/// All-points interpolated average precision. Detections are visited by
/// descending confidence (ties keep input order) and each is matched to the
/// still unmatched ground truth of its image with the highest IoU, if that
/// IoU reaches `iou_t`. With no ground truth at all the result is 1 when
/// there are also no detections and 0 otherwise.
pub fn average_precision_with(
    dets: &[Detection],
    gts: &BTreeMap<String, Vec<BinaryMask>>,
    iou_t: f64,
    kind: IouKind,
) -> Result<f64> {
    if !(iou_t > 0.0 && iou_t <= 1.0) {
        return Err(Error::Parameter(format!("IoU threshold {iou_t} outside (0, 1]")));
    }
    let n_gt: usize = gts.values().map(Vec::len).sum();
    if n_gt == 0 {
        return Ok(if dets.is_empty() { 1.0 } else { 0.0 });
    }
    let gt_boxes: BTreeMap<&String, Vec<Option<BoundingBox>>> =
        gts.iter().map(|(k, v)| (k, v.iter().map(BinaryMask::bounding_box).collect())).collect();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut used: BTreeMap<&String, Vec<bool>> = gts.iter().map(|(k, v)| (k, vec![false; v.len()])).collect();
    let mut hits = Vec::with_capacity(dets.len());
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = gts.get(&d.image_id) {
            let taken = &used[&d.image_id];
            for (j, g) in cands.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let iou = match kind {
                    IouKind::Mask => mask_iou(&d.mask, g)?,
                    IouKind::Box => gt_boxes[&d.image_id][j].map_or(0.0, |b| b.iou(&d.bbox)),
                };
                if iou >= iou_t && best.is_none_or(|(_, v)| iou > v) {
                    best = Some((j, iou));
                }
            }
        }
        if let Some((j, _)) = best {
            used.get_mut(&d.image_id).expect("present")[j] = true;
        }
        hits.push(best.is_some());
    }
    Ok(ap_from_hits(&hits, n_gt))
}

/// Area under the precision envelope for ranked hit flags. Precisions are
/// ratios of small integers, so the sum is kept as an exact fraction while it
/// fits and the result is a single rounding away from the true value.
fn ap_from_hits(hits: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0u128;
    let mut precision: Vec<(u128, u128)> = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += h as u128;
        precision.push((tp, k as u128 + 1));
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        let ((a, b), (c, d)) = (precision[k], precision[k + 1]);
        if c * b > a * d {
            precision[k] = (c, d);
        }
    }
    let picked = || hits.iter().zip(&precision).filter(|(&h, _)| h).map(|(_, &p)| p);
    let exact = picked().try_fold((0u128, 1u128), |(n, d), (a, b)| {
        let num = n.checked_mul(b)?.checked_add(a.checked_mul(d)?)?;
        let den = d.checked_mul(b)?;
        let g = gcd(num, den);
        Some((num / g, den / g))
    });
    match exact.and_then(|(n, d)| Some((n, d.checked_mul(n_gt as u128)?))) {
        Some((n, d)) => {
            let g = gcd(n, d).max(1);
            (n / g) as f64 / (d / g) as f64
        }
        None => picked().map(|(a, b)| a as f64 / b as f64).sum::<f64>() / n_gt as f64,
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// ROC AUC as the normalized Mann-Whitney statistic, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Parameter(format!("score {s} is not a number")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of mid-ranks (1-based) of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
    /// Single-class resamples that were drawn again.
    pub redraws: usize,
}

/// Percentile bootstrap interval for ROC AUC. Resample `i` draws from its own
/// stream of `seed`, so the result does not depend on thread scheduling.
pub fn bootstrap_ci(scores: &[f64], labels: &[bool], n_resamples: usize, level: f64, seed: u64) -> Result<Interval> {
    bootstrap_with_cap(scores, labels, n_resamples, level, seed, 10 * n_resamples)
}

fn bootstrap_with_cap(
    scores: &[f64],
    labels: &[bool],
    n_resamples: usize,
    level: f64,
    seed: u64,
    cap: usize,
) -> Result<Interval> {
    if n_resamples == 0 {
        return Err(Error::Parameter("n_resamples must be ≥ 1".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Parameter(format!("confidence level {level} outside (0, 1)")));
    }
    roc_auc(scores, labels)?;
    let n = scores.len();
    let draws: Vec<(f64, usize)> = (0..n_resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut redraws = 0usize;
            let mut s = vec![0.0; n];
            let mut l = vec![false; n];
            loop {
                for k in 0..n {
                    let j = rng.random_range(0..n);
                    s[k] = scores[j];
                    l[k] = labels[j];
                }
                let pos = l.iter().filter(|&&b| b).count();
                if pos > 0 && pos < n {
                    return (roc_auc(&s, &l).expect("both classes present"), redraws);
                }
                redraws += 1;
                if redraws > cap {
                    return (f64::NAN, redraws);
                }
            }
        })
        .collect();
    let redraws: usize = draws.iter().map(|d| d.1).sum();
    if redraws > cap {
        return Err(Error::UndefinedMetric(format!(
            "{redraws} single-class resamples exceed the limit of {cap}"
        )));
    }
    let aucs: Vec<f64> = draws.into_iter().map(|d| d.0).collect();
    let tail = (1.0 - level) / 2.0;
    Ok(Interval {
        low: nearest_rank(&aucs, tail)?,
        high: nearest_rank(&aucs, 1.0 - tail)?,
        redraws,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub n: usize,
}

impl Timing {
    pub fn coefficient_of_variation(&self) -> f64 {
        if self.mean_ms > 0.0 {
            self.std_ms / self.mean_ms
        } else {
            0.0
        }
    }
}

/// Wall-clock time per input after `warmup` untimed calls (cycling through
/// the inputs). Stops at the first error.
pub fn time_inference<T, R>(mut f: impl FnMut(&T) -> Result<R>, inputs: &[T], warmup: usize) -> Result<Timing> {
    if inputs.is_empty() {
        return Err(Error::Data("no inputs to time".into()));
    }
    for k in 0..warmup {
        std::hint::black_box(f(&inputs[k % inputs.len()])?);
    }
    let mut ms = Vec::with_capacity(inputs.len());
    for x in inputs {
        let t = Instant::now();
        std::hint::black_box(f(x)?);
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let n = ms.len() as f64;
    let mean = ms.iter().sum::<f64>() / n;
    let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Timing {
        mean_ms: mean,
        std_ms: var.sqrt(),
        n: ms.len(),
    })
}

/// SHA-256 of the JSON form of `value` with object keys sorted.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&canonical)?)))
}

/// `report.json`. Timing fields are the only ones that vary between reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mask-IoU average precision.
    pub ap: f64,
    pub ap_box: f64,
    pub iou_threshold: f64,
    /// Mean IoU of each test image's best detection against its blade mask.
    pub mean_iou: f64,
    pub n_images: usize,
    pub n_detections: usize,
    /// Set when a degenerate AP convention applied.
    pub ap_note: Option<String>,
    pub detector: String,
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub n_resamples: usize,
    pub ci_redraws: usize,
    pub n_patches: usize,
    pub n_anomalous: usize,
    /// Segmentation threshold used for extraction.
    pub threshold: f64,
    /// Score above which a patch is flagged.
    pub anomaly_threshold: f64,
    pub n_flagged: usize,
    pub per_image_ms: f64,
    pub per_image_ms_std: f64,
    pub config_digest: String,
}

pub const TIMING_FIELDS: [&str; 2] = ["per_image_ms", "per_image_ms_std"];
