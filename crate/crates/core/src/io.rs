//! PNG codecs for images, masks and label maps, plus small filesystem helpers.
//!
//! Masks are single-channel 8-bit PNGs (0 background, 255 foreground). Label
//! maps are single-channel 16-bit PNGs.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageBuffer as RawImage, ImageFormat, Luma, RgbImage};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ColorSpace, ImageBuffer, ScalarMap};

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png<P, C>(img: &RawImage<P, C>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = read_bytes(path)?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Encodes an sRGB or gray image as 8-bit PNG. Lab input is converted first.
pub fn encode_image_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    match img.color_space() {
        ColorSpace::Gray => {
            let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
            let gray = GrayImage::from_raw(img.width() as u32, img.height() as u32, raw)
                .expect("buffer size matches");
            encode_png(&gray)
        }
        ColorSpace::Srgb => {
            let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
            let rgb = RgbImage::from_raw(img.width() as u32, img.height() as u32, raw)
                .expect("buffer size matches");
            encode_png(&rgb)
        }
        ColorSpace::Lab => encode_image_png(&img.to_srgb()?),
    }
}

pub fn write_image_png(path: &Path, img: &ImageBuffer) -> Result<()> {
    write_bytes(path, &encode_image_png(img)?)
}

/// Reads any PNG as an sRGB image with values in `[0, 1]`.
pub fn read_image_png(path: &Path) -> Result<ImageBuffer> {
    let rgb = decode(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ImageBuffer::new(h as usize, w as usize, ColorSpace::Srgb, data)?.with_source(id))
}

pub fn encode_mask_png(mask: &BinaryMask) -> Result<Vec<u8>> {
    let raw = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let gray = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("buffer size matches");
    encode_png(&gray)
}

pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_bytes(path, &encode_mask_png(mask)?)
}

/// Pixels ≥ 128 are foreground.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let gray = decode(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    BinaryMask::new(
        h as usize,
        w as usize,
        gray.into_raw().into_iter().map(|v| v >= 128).collect(),
    )
}

pub fn encode_labels_png(labels: &[u32], height: usize, width: usize) -> Result<Vec<u8>> {
    let mut raw = Vec::with_capacity(labels.len());
    for &l in labels {
        raw.push(u16::try_from(l).map_err(|_| {
            Error::Data(format!("label {l} does not fit a 16-bit label map"))
        })?);
    }
    let img: RawImage<Luma<u16>, Vec<u16>> =
        RawImage::from_raw(width as u32, height as u32, raw).ok_or_else(|| {
            Error::Shape(format!("{} labels for {height}x{width}", labels.len()))
        })?;
    encode_png(&img)
}

pub fn read_labels_png(path: &Path) -> Result<(Vec<u32>, usize, usize)> {
    let img = decode(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok((
        img.into_raw().into_iter().map(u32::from).collect(),
        h as usize,
        w as usize,
    ))
}

/// Writes a non-negative map as an 8-bit PNG normalized by its maximum.
/// Returns the scale factor (the value that maps to 255).
pub fn write_heatmap_png(path: &Path, map: &ScalarMap) -> Result<f32> {
    let scale = map.data.iter().fold(0.0f32, |m, &v| m.max(v));
    let raw = map
        .data
        .iter()
        .map(|&v| if scale > 0.0 { quantize(v / scale) } else { 0 })
        .collect();
    let gray = GrayImage::from_raw(map.width as u32, map.height as u32, raw)
        .expect("buffer size matches");
    write_bytes(path, &encode_png(&gray)?)?;
    Ok(scale)
}
