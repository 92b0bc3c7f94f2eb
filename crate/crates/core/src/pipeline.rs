//! Glue between stages: blade instances to labelled superpixel patches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{connected_components, rgb_to_lab, BinaryMask, Connectivity, ImageBuffer};
use crate::segnet::BladeInstance;
use crate::slic::{extract_superpixel_patches, label_patches, slic_segment, PatchSample, SlicConfig, SuperpixelMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    /// Minimum fraction of a superpixel inside the blade mask.
    pub coverage_min: f64,
    /// Fraction of a superpixel that must be defective for a positive label.
    pub defect_min_fraction: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            coverage_min: 0.6,
            defect_min_fraction: 0.1,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.coverage_min) || !(0.0..=1.0).contains(&self.defect_min_fraction) {
            return Err(Error::Config("coverage_min and defect_min_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Wraps a known blade mask as an instance with confidence 1, cropping like
/// [`crate::segnet::extract_blades`]. `None` for an empty mask.
pub fn instance_from_mask(img: &ImageBuffer, mask: &BinaryMask, margin: usize) -> Result<Option<BladeInstance>> {
    let Some(bbox) = mask.bounding_box() else { return Ok(None) };
    let (h, w) = img.shape();
    let crop_box = bbox.expand(margin, h, w);
    let zero = vec![0.0f32; img.channels()];
    Ok(Some(BladeInstance {
        crop: img.masked(mask, &zero)?.crop(crop_box).with_source(img.source_id.clone()),
        mask: mask.clone(),
        bbox,
        crop_box,
        confidence: 1.0,
    }))
}

/// Splits a ground-truth mask into per-blade instance masks, largest first.
pub fn split_instances(mask: &BinaryMask, connectivity: Connectivity) -> Vec<BinaryMask> {
    connected_components(mask, connectivity).into_iter().map(|c| c.mask).collect()
}

pub struct InstancePatches {
    /// Superpixels of the instance crop.
    pub spmap: SuperpixelMap,
    pub patches: Vec<PatchSample>,
}

/// SLIC over the masked crop, then one `patch_size` square patch per
/// superpixel that is mostly blade. Patches carry `id` as their image id.
pub fn instance_patches(
    inst: &BladeInstance,
    id: &str,
    slic: &SlicConfig,
    cfg: &PatchConfig,
    patch_size: usize,
) -> Result<InstancePatches> {
    cfg.validate()?;
    let lab = rgb_to_lab(&inst.crop)?;
    let spmap = slic_segment(&lab, slic)?;
    let mut patches = extract_superpixel_patches(&inst.crop, &spmap, &inst.crop_mask(), patch_size, cfg.coverage_min)?;
    for p in &mut patches {
        p.image_id = id.to_string();
        p.image.source_id = id.to_string();
    }
    Ok(InstancePatches { spmap, patches })
}

/// Sets `defect_label` from a full-frame defect mask.
pub fn label_instance_patches(
    ip: &mut InstancePatches,
    inst: &BladeInstance,
    defects: &BinaryMask,
    min_fraction: f64,
) -> Result<()> {
    if defects.shape() != inst.mask.shape() {
        return Err(Error::Shape("defect mask does not match the source frame".into()));
    }
    label_patches(&mut ip.patches, &ip.spmap, &defects.crop(inst.crop_box), min_fraction)
}
