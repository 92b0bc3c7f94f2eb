//! Pixel containers and the small set of image primitives every stage shares:
//! color conversion, thresholding, connected components and mask overlap.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Srgb,
    Lab,
    Gray,
}

impl ColorSpace {
    pub fn name(self) -> &'static str {
        match self {
            ColorSpace::Srgb => "srgb",
            ColorSpace::Lab => "lab",
            ColorSpace::Gray => "gray",
        }
    }
}

/// Interleaved `H×W×C` pixel array.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    color_space: ColorSpace,
    pub source_id: String,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(
        height: usize,
        width: usize,
        color_space: ColorSpace,
        data: Vec<f32>,
    ) -> Result<Self> {
        let channels = match color_space {
            ColorSpace::Gray => 1,
            ColorSpace::Srgb | ColorSpace::Lab => 3,
        };
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            color_space,
            source_id: String::new(),
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color_space: ColorSpace, value: &[f32]) -> Self {
        let channels = value.len();
        let data = value.iter().copied().cycle().take(height * width * channels).collect();
        Self::new(height, width, color_space, data).expect("fill value matches color space")
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn require(&self, space: ColorSpace) -> Result<()> {
        if self.color_space != space {
            return Err(Error::InvalidColorSpace {
                expected: space.name(),
                actual: self.color_space.name(),
            });
        }
        Ok(())
    }

    /// Copy of the `[y0, y1) × [x0, x1)` window.
    pub fn crop(&self, bbox: BoundingBox) -> ImageBuffer {
        let (h, w) = (bbox.height(), bbox.width());
        let mut data = Vec::with_capacity(h * w * self.channels);
        for row in bbox.y0..bbox.y1 {
            let start = (row * self.width + bbox.x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        ImageBuffer {
            height: h,
            width: w,
            channels: self.channels,
            color_space: self.color_space,
            source_id: self.source_id.clone(),
            data,
        }
    }

    /// Writes `tile` into this image with its top-left corner at `(row, col)`.
    pub fn paste(&mut self, tile: &ImageBuffer, row: usize, col: usize) -> Result<()> {
        if tile.channels != self.channels
            || row + tile.height > self.height
            || col + tile.width > self.width
        {
            return Err(Error::Shape(format!(
                "cannot paste {}x{}x{} at ({row},{col}) into {}x{}x{}",
                tile.height, tile.width, tile.channels, self.height, self.width, self.channels
            )));
        }
        let c = self.channels;
        for r in 0..tile.height {
            let dst = ((row + r) * self.width + col) * c;
            let src = r * tile.width * c;
            self.data[dst..dst + tile.width * c]
                .copy_from_slice(&tile.data[src..src + tile.width * c]);
        }
        Ok(())
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize(&self, height: usize, width: usize) -> ImageBuffer {
        let c = self.channels;
        let mut data = vec![0.0f32; height * width * c];
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for row in 0..height {
            let fy = ((row as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for col in 0..width {
                let fx = ((col as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                let out = &mut data[(row * width + col) * c..(row * width + col + 1) * c];
                for (ch, o) in out.iter_mut().enumerate() {
                    let p00 = self.data[(y0 * self.width + x0) * c + ch];
                    let p01 = self.data[(y0 * self.width + x1) * c + ch];
                    let p10 = self.data[(y1 * self.width + x0) * c + ch];
                    let p11 = self.data[(y1 * self.width + x1) * c + ch];
                    let top = p00 + (p01 - p00) * wx;
                    let bottom = p10 + (p11 - p10) * wx;
                    *o = top + (bottom - top) * wy;
                }
            }
        }
        ImageBuffer {
            height,
            width,
            channels: c,
            color_space: self.color_space,
            source_id: self.source_id.clone(),
            data,
        }
    }

    /// Rec. 601 luma for sRGB input, `L/100` for Lab, identity for gray.
    pub fn to_gray(&self) -> ImageBuffer {
        let data = match self.color_space {
            ColorSpace::Gray => self.data.clone(),
            ColorSpace::Srgb => self
                .data
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
            ColorSpace::Lab => self.data.chunks_exact(3).map(|p| p[0] / 100.0).collect(),
        };
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 1,
            color_space: ColorSpace::Gray,
            source_id: self.source_id.clone(),
            data,
        }
    }

    /// Gray images are replicated into three sRGB channels.
    pub fn to_srgb(&self) -> Result<ImageBuffer> {
        match self.color_space {
            ColorSpace::Srgb => Ok(self.clone()),
            ColorSpace::Gray => {
                let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
                Ok(ImageBuffer::new(self.height, self.width, ColorSpace::Srgb, data)?
                    .with_source(self.source_id.clone()))
            }
            ColorSpace::Lab => lab_to_rgb(self),
        }
    }

    /// Rotates by `quarter_turns × 90°` counter-clockwise.
    pub fn rot90(&self, quarter_turns: u8) -> ImageBuffer {
        let (data, h, w) = rot90_raw(&self.data, self.height, self.width, self.channels, quarter_turns);
        ImageBuffer {
            height: h,
            width: w,
            channels: self.channels,
            color_space: self.color_space,
            source_id: self.source_id.clone(),
            data,
        }
    }

    pub fn flip_horizontal(&self) -> ImageBuffer {
        ImageBuffer {
            data: flip_raw(&self.data, self.height, self.width, self.channels),
            ..self.clone()
        }
    }

    /// Replaces every pixel outside `mask` by `fill`.
    pub fn masked(&self, mask: &BinaryMask, fill: &[f32]) -> Result<ImageBuffer> {
        check_shape(self.shape(), mask.shape())?;
        let mut out = self.clone();
        for (i, px) in out.data.chunks_exact_mut(self.channels).enumerate() {
            if !mask.bits[i] {
                px.copy_from_slice(fill);
            }
        }
        Ok(out)
    }
}

/// Counter-clockwise rotation of an interleaved `h×w×c` raster.
pub(crate) fn rot90_raw<T: Copy>(
    data: &[T],
    h: usize,
    w: usize,
    c: usize,
    quarter_turns: u8,
) -> (Vec<T>, usize, usize) {
    let k = quarter_turns % 4;
    let (oh, ow) = if k % 2 == 0 { (h, w) } else { (w, h) };
    let mut out = Vec::with_capacity(data.len());
    for r in 0..oh {
        for col in 0..ow {
            let (sr, sc) = match k {
                0 => (r, col),
                // out(r, c) = in(c, w-1-r)
                1 => (col, w - 1 - r),
                2 => (h - 1 - r, w - 1 - col),
                _ => (h - 1 - col, r),
            };
            let i = (sr * w + sc) * c;
            out.extend_from_slice(&data[i..i + c]);
        }
    }
    (out, oh, ow)
}

pub(crate) fn flip_raw<T: Copy>(data: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for r in 0..h {
        for col in (0..w).rev() {
            let i = (r * w + col) * c;
            out.extend_from_slice(&data[i..i + c]);
        }
    }
    out
}

/// Real-valued `H×W` map, e.g. raw segmenter output or a residual heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} map",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Per-pixel foreground flags.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask {
            bits: self.bits.iter().map(|&b| !b).collect(),
            ..self.clone()
        }
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.zip(other, |a, b| a || b)
    }

    fn zip(&self, other: &BinaryMask, f: impl Fn(bool, bool) -> bool) -> Result<BinaryMask> {
        check_shape(self.shape(), other.shape())?;
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self ⊆ other`
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn crop(&self, bbox: BoundingBox) -> BinaryMask {
        BinaryMask::from_fn(bbox.height(), bbox.width(), |r, c| {
            self.get(bbox.y0 + r, bbox.x0 + c)
        })
    }

    pub fn rot90(&self, quarter_turns: u8) -> BinaryMask {
        let (bits, height, width) = rot90_raw(&self.bits, self.height, self.width, 1, quarter_turns);
        BinaryMask { height, width, bits }
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        BinaryMask {
            bits: flip_raw(&self.bits, self.height, self.width, 1),
            ..self.clone()
        }
    }

    /// Tight bounding box of the true pixels, `None` when empty.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let mut bbox: Option<BoundingBox> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    let b = bbox.get_or_insert(BoundingBox {
                        x0: c,
                        y0: r,
                        x1: c + 1,
                        y1: r + 1,
                    });
                    b.x0 = b.x0.min(c);
                    b.x1 = b.x1.max(c + 1);
                    b.y1 = b.y1.max(r + 1);
                }
            }
        }
        bbox
    }
}

pub(crate) fn check_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Inclusive-exclusive pixel rectangle: columns `[x0, x1)`, rows `[y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Parameter(format!(
                "degenerate box ({x0},{y0},{x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// Grows the box by `margin` pixels on every side, clipped to `height×width`.
    pub fn expand(&self, margin: usize, height: usize, width: usize) -> BoundingBox {
        BoundingBox {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width),
            y1: (self.y1 + margin).min(height),
        }
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let iy = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        let inter = (ix * iy) as f64;
        inter / ((self.area() + other.area()) as f64 - inter)
    }
}

// sRGB primaries under D65. The reference white is the row sum so that
// (1,1,1) maps exactly onto the neutral axis.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn white_point() -> [f64; 3] {
    [
        RGB_TO_XYZ[0].iter().sum(),
        RGB_TO_XYZ[1].iter().sum(),
        RGB_TO_XYZ[2].iter().sum(),
    ]
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

const DELTA: f64 = 6.0 / 29.0;

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    inv
}

pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let white = white_point();
    let mut f = [0.0; 3];
    for i in 0..3 {
        let xyz = RGB_TO_XYZ[i][0] * lin[0] + RGB_TO_XYZ[i][1] * lin[1] + RGB_TO_XYZ[i][2] * lin[2];
        f[i] = lab_f(xyz / white[i]);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

pub fn lab_pixel_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let white = white_point();
    let xyz = [
        lab_f_inv(fx) * white[0],
        lab_f_inv(fy) * white[1],
        lab_f_inv(fz) * white[2],
    ];
    let inv = invert3(&RGB_TO_XYZ);
    let mut rgb = [0.0; 3];
    for i in 0..3 {
        let lin = inv[i][0] * xyz[0] + inv[i][1] * xyz[1] + inv[i][2] * xyz[2];
        rgb[i] = linear_to_srgb(lin.max(0.0)).clamp(0.0, 1.0);
    }
    rgb
}

/// sRGB → CIEXYZ (D65) → CIELAB, per pixel.
pub fn rgb_to_lab(img: &ImageBuffer) -> Result<ImageBuffer> {
    img.require(ColorSpace::Srgb)?;
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|p| srgb_pixel_to_lab([p[0] as f64, p[1] as f64, p[2] as f64]).map(|v| v as f32))
        .collect();
    Ok(ImageBuffer {
        color_space: ColorSpace::Lab,
        data,
        ..img.clone()
    })
}

pub fn lab_to_rgb(img: &ImageBuffer) -> Result<ImageBuffer> {
    img.require(ColorSpace::Lab)?;
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|p| lab_pixel_to_srgb([p[0] as f64, p[1] as f64, p[2] as f64]).map(|v| v as f32))
        .collect();
    Ok(ImageBuffer {
        color_space: ColorSpace::Srgb,
        data,
        ..img.clone()
    })
}

/// `raw ≥ t` per pixel.
pub fn threshold_mask(raw: &ScalarMap, t: f64) -> Result<BinaryMask> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Parameter(format!("threshold {t} outside (0,1)")));
    }
    let t = t as f32;
    BinaryMask::new(
        raw.height,
        raw.width,
        raw.data.iter().map(|&v| v >= t).collect(),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "4")]
    Four,
    #[default]
    #[serde(rename = "8")]
    Eight,
}

impl Connectivity {
    pub(crate) fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub mask: BinaryMask,
    pub bbox: BoundingBox,
    pub area: usize,
}

/// Labels each pixel with a component id (`u32::MAX` for background) using
/// breadth-first flood fill in raster order. Returns the label image and the
/// per-component pixel counts.
pub(crate) fn label_components(
    height: usize,
    width: usize,
    foreground: impl Fn(usize) -> bool,
    same: impl Fn(usize, usize) -> bool,
    connectivity: Connectivity,
) -> (Vec<u32>, Vec<usize>) {
    let mut labels = vec![u32::MAX; height * width];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..height * width {
        if labels[start] != u32::MAX || !foreground(start) {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        labels[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = ((i / width) as isize, (i % width) as isize);
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                    continue;
                }
                let j = nr as usize * width + nc as usize;
                if labels[j] == u32::MAX && foreground(j) && same(start, j) {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Splits the foreground into connected instances, largest first.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Vec<Component> {
    let (h, w) = mask.shape();
    let (labels, sizes) = label_components(h, w, |i| mask.bits[i], |_, _| true, connectivity);
    let mut comps: Vec<Component> = sizes
        .iter()
        .map(|&area| Component {
            mask: BinaryMask::empty(h, w),
            bbox: BoundingBox {
                x0: usize::MAX,
                y0: usize::MAX,
                x1: 0,
                y1: 0,
            },
            area,
        })
        .collect();
    for (i, &l) in labels.iter().enumerate() {
        if l == u32::MAX {
            continue;
        }
        let (r, c) = (i / w, i % w);
        let comp = &mut comps[l as usize];
        comp.mask.bits[i] = true;
        comp.bbox.x0 = comp.bbox.x0.min(c);
        comp.bbox.y0 = comp.bbox.y0.min(r);
        comp.bbox.x1 = comp.bbox.x1.max(c + 1);
        comp.bbox.y1 = comp.bbox.y1.max(r + 1);
    }
    // stable: equal areas keep raster order of their first pixel
    comps.sort_by(|a, b| b.area.cmp(&a.area));
    comps
}

/// Intersection over union; two empty masks agree perfectly.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_shape(a.shape(), b.shape())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
