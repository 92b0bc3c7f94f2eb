//! Visual overlays: instance masks, superpixel boundaries and residual
//! heatmaps blended over a source image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{check_shape, BinaryMask, BoundingBox, ColorSpace, ImageBuffer, ScalarMap};
use crate::slic::SuperpixelMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverlayStyle {
    pub mask_alpha: f32,
    pub heat_alpha: f32,
    pub boundary_color: [f32; 3],
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self {
            mask_alpha: 0.4,
            heat_alpha: 0.7,
            boundary_color: [1.0, 1.0, 0.0],
        }
    }
}

pub enum Layer<'a> {
    /// Filled mask in the colour of `id`.
    Mask { mask: &'a BinaryMask, id: u32 },
    /// Pixels with a 4-neighbour in another superpixel, placed at `at`
    /// (`(row, col)` of the map's top-left corner).
    Boundaries { map: &'a SuperpixelMap, at: (usize, usize) },
    /// Heat values in `[0, 1]` placed at `at`; blending strength follows the
    /// value.
    Heat { map: &'a ScalarMap, at: (usize, usize) },
}

/// Saturated colour derived from a hash of `id`; identical ids always get
/// identical colours.
pub fn label_color(id: u32) -> [f32; 3] {
    let mut h = id.wrapping_mul(0x9E37_79B9) ^ 0x5bd1_e995;
    h ^= h >> 15;
    h = h.wrapping_mul(0x2c1b_3c6d);
    h ^= h >> 12;
    let hue = (h % 360) as f32;
    hsv_to_rgb(hue, 0.85, 0.95)
}

fn hsv_to_rgb(hue: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let x = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Black to red to yellow to white.
pub fn heat_color(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0) * 3.0;
    [v.min(1.0), (v - 1.0).clamp(0.0, 1.0), (v - 2.0).clamp(0.0, 1.0)]
}

fn blend(px: &mut [f32], color: [f32; 3], alpha: f32) {
    for (p, c) in px.iter_mut().zip(color) {
        *p = (1.0 - alpha) * *p + alpha * c;
    }
}

fn placed(at: (usize, usize), size: (usize, usize), frame: (usize, usize)) -> Result<()> {
    if at.0 + size.0 > frame.0 || at.1 + size.1 > frame.1 {
        return Err(Error::Shape(format!(
            "layer of {size:?} at {at:?} does not fit a {frame:?} image"
        )));
    }
    Ok(())
}

/// Draws the layers in order over an sRGB copy of `img`.
pub fn render_overlay(img: &ImageBuffer, layers: &[Layer], style: &OverlayStyle) -> Result<ImageBuffer> {
    let mut out = match img.color_space() {
        ColorSpace::Srgb => img.clone(),
        ColorSpace::Lab => img.to_srgb()?,
        ColorSpace::Gray => {
            let data = img.data().iter().flat_map(|&v| [v, v, v]).collect();
            ImageBuffer::new(img.height(), img.width(), ColorSpace::Srgb, data)?.with_source(img.source_id.clone())
        }
    };
    let frame = out.shape();
    for layer in layers {
        match layer {
            Layer::Mask { mask, id } => {
                check_shape(mask.shape(), frame)?;
                let color = label_color(*id);
                for r in 0..frame.0 {
                    for c in 0..frame.1 {
                        if mask.get(r, c) {
                            blend(out.pixel_mut(r, c), color, style.mask_alpha);
                        }
                    }
                }
            }
            Layer::Boundaries { map, at } => {
                let (h, w) = (map.height, map.width);
                placed(*at, (h, w), frame)?;
                for r in 0..h {
                    for c in 0..w {
                        let l = map.label(r, c);
                        let edge = (r > 0 && map.label(r - 1, c) != l)
                            || (r + 1 < h && map.label(r + 1, c) != l)
                            || (c > 0 && map.label(r, c - 1) != l)
                            || (c + 1 < w && map.label(r, c + 1) != l);
                        if edge {
                            out.pixel_mut(at.0 + r, at.1 + c).copy_from_slice(&style.boundary_color);
                        }
                    }
                }
            }
            Layer::Heat { map, at } => {
                placed(*at, map.shape(), frame)?;
                for r in 0..map.height {
                    for c in 0..map.width {
                        let v = map.get(r, c).clamp(0.0, 1.0);
                        if v > 0.0 {
                            blend(out.pixel_mut(at.0 + r, at.1 + c), heat_color(v), style.heat_alpha * v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Draws a one-pixel rectangle outline.
pub fn draw_box(img: &mut ImageBuffer, bbox: BoundingBox, color: [f32; 3]) -> Result<()> {
    let (h, w) = img.shape();
    if bbox.x1 > w || bbox.y1 > h || bbox.x0 >= bbox.x1 || bbox.y0 >= bbox.y1 {
        return Err(Error::Shape(format!("{bbox:?} outside a {h}x{w} image")));
    }
    if img.channels() != 3 {
        return Err(Error::Data("boxes are drawn on 3-channel images".into()));
    }
    for c in bbox.x0..bbox.x1 {
        img.pixel_mut(bbox.y0, c).copy_from_slice(&color);
        img.pixel_mut(bbox.y1 - 1, c).copy_from_slice(&color);
    }
    for r in bbox.y0..bbox.y1 {
        img.pixel_mut(r, bbox.x0).copy_from_slice(&color);
        img.pixel_mut(r, bbox.x1 - 1).copy_from_slice(&color);
    }
    Ok(())
}
