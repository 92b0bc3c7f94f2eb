//! One configuration document for the whole pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::anodet::DetectorConfig;
use crate::error::{Error, Result};
use crate::io::read_bytes;
use crate::morphology::PseudoGtConfig;
use crate::overlay::OverlayStyle;
use crate::pipeline::PatchConfig;
use crate::segnet::{ExtractConfig, SegNetConfig, TrainHyper};
use crate::slic::SlicConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Share of positives held out for testing.
    pub test_fraction: f64,
    /// Applied to every image on load.
    pub rescale: f64,
    /// Negatives mixed into segmenter training; `None` uses all of them.
    pub negatives: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            rescale: 1.0,
            negatives: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub n_resamples: usize,
    pub ci_level: f64,
    /// Quantile of training scores used as the flagging threshold.
    pub calibration_quantile: f64,
    /// Heatmap quantile marking hot pixels in flagged patches.
    pub heat_quantile: f64,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            n_resamples: 1000,
            ci_level: 0.95,
            calibration_quantile: 0.95,
            heat_quantile: 0.9,
            warmup: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub pseudo_gt: PseudoGtConfig,
    pub segnet: SegNetConfig,
    pub train: TrainHyper,
    pub extract: ExtractConfig,
    pub slic: SlicConfig,
    pub patches: PatchConfig,
    pub detector: DetectorConfig,
    pub eval: EvalConfig,
    pub overlay: OverlayStyle,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            pseudo_gt: PseudoGtConfig::default(),
            segnet: SegNetConfig::default(),
            train: TrainHyper::desk(),
            extract: ExtractConfig::default(),
            slic: SlicConfig {
                n_clusters: 20,
                ..SlicConfig::default()
            },
            patches: PatchConfig::default(),
            detector: DetectorConfig {
                patch_size: 32,
                ..DetectorConfig::default()
            },
            eval: EvalConfig::default(),
            overlay: OverlayStyle::default(),
        }
    }
}

/// Recursively overwrites `base` with the keys present in `patch`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl PipelineConfig {
    /// Parses a partial document: keys that are present override the
    /// defaults, unknown keys are rejected.
    pub fn from_json(text: &[u8]) -> Result<Self> {
        let patch: Value = serde_json::from_slice(text).map_err(|e| Error::Config(e.to_string()))?;
        if !patch.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        let mut full = serde_json::to_value(Self::default())?;
        merge(&mut full, patch);
        let cfg: Self = serde_json::from_value(full).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_json(&bytes).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Uses one master seed for generation, both trainings and resampling.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self.detector.seed = seed;
        self.eval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.segnet.validate()?;
        self.train.validate()?;
        self.slic.validate()?;
        self.patches.validate()?;
        self.detector.validate()?;
        let d = &self.data;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction {} outside (0, 1)", d.test_fraction)));
        }
        if !(d.rescale > 0.0 && d.rescale.is_finite()) {
            return Err(Error::Config(format!("rescale {} must be > 0", d.rescale)));
        }
        let x = &self.extract;
        if !(x.threshold > 0.0 && x.threshold < 1.0) {
            return Err(Error::Config(format!("extraction threshold {} outside (0, 1)", x.threshold)));
        }
        let e = &self.eval;
        for (name, v) in [("ci_level", e.ci_level), ("calibration_quantile", e.calibration_quantile)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} {v} outside (0, 1)")));
            }
        }
        if !(e.heat_quantile > 0.0 && e.heat_quantile <= 1.0) {
            return Err(Error::Config(format!("heat_quantile {} outside (0, 1]", e.heat_quantile)));
        }
        if !(e.iou_threshold > 0.0 && e.iou_threshold <= 1.0) || e.n_resamples == 0 {
            return Err(Error::Config("iou_threshold must lie in (0, 1] and n_resamples be ≥ 1".into()));
        }
        Ok(())
    }
}
