//! SLIC superpixels over CIELAB crops and the conversion of superpixels into
//! fixed-size patches for anomaly scoring.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{label_components, BinaryMask, BoundingBox, ColorSpace, Connectivity, ImageBuffer};
use crate::io::{encode_labels_png, read_json, read_labels_png, write_bytes, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlicConfig {
    pub n_clusters: usize,
    /// Spatial proximity factor.
    pub m: f64,
    pub max_iter: usize,
    /// Smallest region kept by connectivity enforcement; `None` means
    /// `interval² / 4`.
    pub min_region: Option<usize>,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            n_clusters: 100,
            m: 10.0,
            max_iter: 10,
            min_region: None,
        }
    }
}

impl SlicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::Parameter("n_clusters must be ≥ 1".into()));
        }
        if !(self.m > 0.0) || !self.m.is_finite() {
            return Err(Error::Parameter(format!("m = {} must be > 0", self.m)));
        }
        Ok(())
    }
}

/// A point in joint color/position space; `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterCenter {
    pub l: f64,
    pub a: f64,
    pub b: f64,
    pub x: f64,
    pub y: f64,
}

impl ClusterCenter {
    fn at(lab: &ImageBuffer, row: usize, col: usize) -> Self {
        let p = lab.pixel(row, col);
        Self {
            l: p[0] as f64,
            a: p[1] as f64,
            b: p[2] as f64,
            x: col as f64,
            y: row as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelMap {
    pub height: usize,
    pub width: usize,
    /// Row-major label per pixel, each in `[0, centers.len())`.
    pub labels: Vec<u32>,
    /// Centers of the final assignment step, indexed by label.
    pub centers: Vec<ClusterCenter>,
    pub interval: f64,
}

impl SuperpixelMap {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn region(&self, id: u32) -> BinaryMask {
        BinaryMask::new(self.height, self.width, self.labels.iter().map(|&l| l == id).collect())
            .expect("label buffer matches frame")
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centers.len()];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    /// Label PNG plus a JSON sidecar with the centers and the config used.
    pub fn save(&self, png: &Path, sidecar: &Path, cfg: &SlicConfig) -> Result<()> {
        write_bytes(png, &encode_labels_png(&self.labels, self.height, self.width)?)?;
        write_json(
            sidecar,
            &Sidecar {
                config: cfg.clone(),
                interval: self.interval,
                height: self.height,
                width: self.width,
                centers: self.centers.clone(),
            },
        )
    }

    pub fn load(png: &Path, sidecar: &Path) -> Result<(Self, SlicConfig)> {
        let (labels, h, w) = read_labels_png(png)?;
        let side: Sidecar = read_json(sidecar)?;
        if (h, w) != (side.height, side.width) {
            return Err(Error::Data(format!(
                "label map is {h}x{w} but sidecar says {}x{}",
                side.height, side.width
            )));
        }
        if labels.iter().any(|&l| l as usize >= side.centers.len()) {
            return Err(Error::Data("label outside the center list".into()));
        }
        Ok((
            Self {
                height: h,
                width: w,
                labels,
                centers: side.centers,
                interval: side.interval,
            },
            side.config,
        ))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    config: SlicConfig,
    interval: f64,
    height: usize,
    width: usize,
    centers: Vec<ClusterCenter>,
}

/// Grid spacing `round(√(H·W / n))`, at least 1.
pub fn grid_interval(height: usize, width: usize, n: usize) -> usize {
    (((height * width) as f64 / n as f64).sqrt().round() as usize).max(1)
}

fn gradient(lab: &ImageBuffer, row: usize, col: usize) -> f64 {
    let (h, w) = lab.shape();
    let diff = |p: &[f32], q: &[f32]| -> f64 {
        p.iter().zip(q).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum()
    };
    let (l, r) = (col.saturating_sub(1), (col + 1).min(w - 1));
    let (u, d) = (row.saturating_sub(1), (row + 1).min(h - 1));
    diff(lab.pixel(row, r), lab.pixel(row, l)) + diff(lab.pixel(d, col), lab.pixel(u, col))
}

/// Seeds on a regular grid with spacing `interval` offset by half a step,
/// each nudged to the lowest-gradient pixel of its 3×3 neighborhood. Ties
/// keep the grid position. No nudging when the spacing is below 3, since
/// neighbors would then collide.
pub fn init_centers(lab: &ImageBuffer, n: usize) -> Result<Vec<ClusterCenter>> {
    lab.require(ColorSpace::Lab)?;
    let (h, w) = lab.shape();
    if n == 0 || n > h * w {
        return Err(Error::Parameter(format!("cluster count {n} outside [1, {}]", h * w)));
    }
    let s = grid_interval(h, w, n);
    let reach: isize = if s >= 3 { 1 } else { 0 };
    let mut centers = Vec::new();
    for row in (s / 2..h).step_by(s) {
        for col in (s / 2..w).step_by(s) {
            // lowest gradient, then smallest displacement, then raster order
            let mut best = ((row, col), gradient(lab, row, col), 0);
            for dr in -reach..=reach {
                for dc in -reach..=reach {
                    let (r, c) = (row as isize + dr, col as isize + dc);
                    if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                        continue;
                    }
                    let g = gradient(lab, r as usize, c as usize);
                    let shift = dr.abs() + dc.abs();
                    if g < best.1 || (g == best.1 && shift < best.2) {
                        best = ((r as usize, c as usize), g, shift);
                    }
                }
            }
            centers.push(ClusterCenter::at(lab, best.0 .0, best.0 .1));
        }
    }
    Ok(centers)
}

/// `d_lab + (m / interval)·d_xy` with plain Euclidean color and position
/// distances.
pub fn slic_distance(p: &ClusterCenter, c: &ClusterCenter, interval: f64, m: f64) -> f64 {
    let d_lab = ((p.l - c.l).powi(2) + (p.a - c.a).powi(2) + (p.b - c.b).powi(2)).sqrt();
    let d_xy = ((p.x - c.x).powi(2) + (p.y - c.y).powi(2)).sqrt();
    d_lab + (m / interval) * d_xy
}

/// Row and column span of a center's `2·interval`-per-side search window.
fn window(c: &ClusterCenter, s: f64, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let r0 = (c.y - s).ceil().max(0.0) as usize;
    let r1 = ((c.y + s).floor() as usize + 1).min(h);
    let c0 = (c.x - s).ceil().max(0.0) as usize;
    let c1 = ((c.x + s).floor() as usize + 1).min(w);
    (r0, r1, c0, c1)
}

/// True when pixel `(row, col)` lies in the search window of `c`.
pub fn in_window(c: &ClusterCenter, interval: f64, row: usize, col: usize) -> bool {
    (row as f64 - c.y).abs() <= interval && (col as f64 - c.x).abs() <= interval
}

/// Each pixel takes the center with the smallest distance among those whose
/// window covers it (lowest index on ties); uncovered pixels fall back to the
/// globally nearest center.
fn assign(lab: &ImageBuffer, centers: &[ClusterCenter], s: f64, m: f64) -> Vec<u32> {
    let (h, w) = lab.shape();
    let windows: Vec<_> = centers.iter().map(|c| window(c, s, h, w)).collect();
    let mut labels = vec![0u32; h * w];
    labels.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
        let mut best = vec![f64::INFINITY; w];
        let mut best_k = vec![u32::MAX; w];
        for (k, (c, &(r0, r1, c0, c1))) in centers.iter().zip(&windows).enumerate() {
            if row < r0 || row >= r1 {
                continue;
            }
            for col in c0..c1 {
                let d = slic_distance(&ClusterCenter::at(lab, row, col), c, s, m);
                if d < best[col] {
                    best[col] = d;
                    best_k[col] = k as u32;
                }
            }
        }
        for col in 0..w {
            if best_k[col] == u32::MAX {
                let p = ClusterCenter::at(lab, row, col);
                let mut nearest = (f64::INFINITY, 0u32);
                for (k, c) in centers.iter().enumerate() {
                    let d = slic_distance(&p, c, s, m);
                    if d < nearest.0 {
                        nearest = (d, k as u32);
                    }
                }
                best_k[col] = nearest.1;
            }
            out[col] = best_k[col];
        }
    });
    labels
}

/// Moves each center to the mean `labxy` of its members; empty clusters
/// stay put.
fn update(lab: &ImageBuffer, labels: &[u32], centers: &mut [ClusterCenter]) {
    let w = lab.width();
    let mut acc = vec![[0.0f64; 6]; centers.len()];
    for (i, &k) in labels.iter().enumerate() {
        let (row, col) = (i / w, i % w);
        let p = lab.pixel(row, col);
        let a = &mut acc[k as usize];
        a[0] += p[0] as f64;
        a[1] += p[1] as f64;
        a[2] += p[2] as f64;
        a[3] += col as f64;
        a[4] += row as f64;
        a[5] += 1.0;
    }
    for (c, a) in centers.iter_mut().zip(&acc) {
        if a[5] > 0.0 {
            *c = ClusterCenter {
                l: a[0] / a[5],
                a: a[1] / a[5],
                b: a[2] / a[5],
                x: a[3] / a[5],
                y: a[4] / a[5],
            };
        }
    }
}

/// The clustering stage alone: `max_iter` assignment rounds with center
/// updates between them. Labels may be fragmented and some centers empty.
pub fn slic_cluster(lab: &ImageBuffer, cfg: &SlicConfig) -> Result<SuperpixelMap> {
    cfg.validate()?;
    lab.require(ColorSpace::Lab)?;
    let (h, w) = lab.shape();
    let n = cfg.n_clusters.min(h * w);
    let s = grid_interval(h, w, n) as f64;
    let mut centers = init_centers(lab, n)?;
    let mut labels = assign(lab, &centers, s, cfg.m);
    for _ in 1..cfg.max_iter.max(1) {
        update(lab, &labels, &mut centers);
        labels = assign(lab, &centers, s, cfg.m);
    }
    Ok(SuperpixelMap {
        height: h,
        width: w,
        labels,
        centers,
        interval: s,
    })
}

/// Clustering followed by 4-connectivity enforcement; centers left without
/// pixels are dropped and labels renumbered.
pub fn slic_segment(lab: &ImageBuffer, cfg: &SlicConfig) -> Result<SuperpixelMap> {
    let raw = slic_cluster(lab, cfg)?;
    let interval = raw.interval as usize;
    let min_region = cfg.min_region.unwrap_or(interval * interval / 4);
    let labels = enforce_connectivity(&raw.labels, raw.height, raw.width, min_region)?;
    let (labels, centers) = compact(labels, &raw.centers);
    Ok(SuperpixelMap { labels, centers, ..raw })
}

/// Renumbers labels to `0..k` in order of center index and keeps only the
/// centers still in use.
fn compact(mut labels: Vec<u32>, centers: &[ClusterCenter]) -> (Vec<u32>, Vec<ClusterCenter>) {
    let mut used = vec![false; centers.len()];
    for &l in &labels {
        used[l as usize] = true;
    }
    let mut remap = vec![u32::MAX; centers.len()];
    let mut kept = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        if used[k] {
            remap[k] = kept.len() as u32;
            kept.push(*c);
        }
    }
    for l in &mut labels {
        *l = remap[*l as usize];
    }
    (labels, kept)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Splits every label into 4-connected fragments. A label keeps only its
/// largest fragment (earliest in raster order on ties); the other fragments
/// and any fragment smaller than `min_region` are merged, smallest first, into
/// the largest adjacent region. Output labels are drawn from the input labels.
pub fn enforce_connectivity(labels: &[u32], height: usize, width: usize, min_region: usize) -> Result<Vec<u32>> {
    if labels.len() != height * width {
        return Err(Error::Shape(format!("{} labels for {height}x{width}", labels.len())));
    }
    let (comp, sizes) = label_components(
        height,
        width,
        |_| true,
        |a, b| labels[a] == labels[b],
        Connectivity::Four,
    );
    let n = sizes.len();
    let mut comp_label = vec![0u32; n];
    for (i, &c) in comp.iter().enumerate() {
        comp_label[c as usize] = labels[i];
    }
    // largest fragment per label; components are numbered in raster order
    let mut main: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for c in 0..n {
        let e = main.entry(comp_label[c]).or_insert(c);
        if sizes[c] > sizes[*e] {
            *e = c;
        }
    }
    let mut adjacent: Vec<Vec<usize>> = vec![Vec::new(); n];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            let a = comp[i] as usize;
            for j in [(c + 1 < width).then(|| i + 1), (r + 1 < height).then(|| i + width)]
                .into_iter()
                .flatten()
            {
                let b = comp[j] as usize;
                if a != b {
                    adjacent[a].push(b);
                    adjacent[b].push(a);
                }
            }
        }
    }
    for adj in &mut adjacent {
        adj.sort_unstable();
        adj.dedup();
    }
    let mut parent: Vec<usize> = (0..n).collect();
    let mut size = sizes.clone();
    let mut members: Vec<Vec<usize>> = (0..n).map(|c| vec![c]).collect();
    let orphan = |c: usize| main[&comp_label[c]] != c;
    let mut order: Vec<usize> = (0..n).filter(|&c| orphan(c) || sizes[c] < min_region).collect();
    order.sort_by_key(|&c| (sizes[c], c));
    for c in order {
        // earlier merges may have grown c past the size limit
        if !orphan(c) && size[c] >= min_region {
            continue;
        }
        let mut best: Option<(usize, usize)> = None;
        for &m in &members[c] {
            for &nb in &adjacent[m] {
                let r = find(&mut parent, nb);
                if r == c {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bs, br)) => size[r] > bs || (size[r] == bs && r < br),
                };
                if better {
                    best = Some((size[r], r));
                }
            }
        }
        if let Some((_, target)) = best {
            parent[c] = target;
            size[target] += size[c];
            let moved = std::mem::take(&mut members[c]);
            members[target].extend(moved);
        }
    }
    // each surviving group takes the label of its root fragment
    let root_label: Vec<u32> = (0..n).map(|c| comp_label[find(&mut parent, c)]).collect();
    Ok(comp.iter().map(|&c| root_label[c as usize]).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub image_id: String,
    pub sp_id: u32,
    /// Fraction of the superpixel inside the blade mask.
    pub coverage: f64,
    /// Superpixel bounding box in the source image.
    pub bbox: BoundingBox,
    pub image: ImageBuffer,
    /// Ground truth for synthetic data, `None` when unknown.
    pub defect_label: Option<bool>,
}

/// One patch per superpixel whose blade coverage reaches `coverage_min`: the
/// superpixel's bounding box, with pixels outside the superpixel painted in
/// its mean color, resized to `patch_size × patch_size`.
pub fn extract_superpixel_patches(
    img: &ImageBuffer,
    spmap: &SuperpixelMap,
    blade_mask: &BinaryMask,
    patch_size: usize,
    coverage_min: f64,
) -> Result<Vec<PatchSample>> {
    if img.shape() != (spmap.height, spmap.width) || blade_mask.shape() != img.shape() {
        return Err(Error::Shape(format!(
            "image {:?}, superpixels {}x{}, mask {:?}",
            img.shape(),
            spmap.height,
            spmap.width,
            blade_mask.shape()
        )));
    }
    if patch_size == 0 {
        return Err(Error::Parameter("patch_size must be ≥ 1".into()));
    }
    let img = match img.color_space() {
        ColorSpace::Lab => img.to_srgb()?,
        _ => img.clone(),
    };
    let ch = img.channels();
    let k = spmap.len();
    let mut count = vec![0usize; k];
    let mut inside = vec![0usize; k];
    let mut color = vec![vec![0.0f64; ch]; k];
    let mut boxes = vec![(usize::MAX, usize::MAX, 0usize, 0usize); k];
    for (i, &l) in spmap.labels.iter().enumerate() {
        let l = l as usize;
        let (r, c) = (i / spmap.width, i % spmap.width);
        count[l] += 1;
        inside[l] += blade_mask.bits()[i] as usize;
        for (acc, &v) in color[l].iter_mut().zip(img.pixel(r, c)) {
            *acc += v as f64;
        }
        let b = &mut boxes[l];
        *b = (b.0.min(c), b.1.min(r), b.2.max(c + 1), b.3.max(r + 1));
    }
    let mut out = Vec::new();
    for id in 0..k {
        if count[id] == 0 {
            continue;
        }
        let coverage = inside[id] as f64 / count[id] as f64;
        if coverage < coverage_min {
            continue;
        }
        let (x0, y0, x1, y1) = boxes[id];
        let bbox = BoundingBox { x0, y0, x1, y1 };
        let mean: Vec<f32> = color[id].iter().map(|&s| (s / count[id] as f64) as f32).collect();
        let mut crop = img.crop(bbox);
        for r in 0..bbox.height() {
            for c in 0..bbox.width() {
                if spmap.label(y0 + r, x0 + c) != id as u32 {
                    crop.pixel_mut(r, c).copy_from_slice(&mean);
                }
            }
        }
        out.push(PatchSample {
            image_id: img.source_id.clone(),
            sp_id: id as u32,
            coverage,
            bbox,
            image: crop.resize(patch_size, patch_size).with_source(img.source_id.clone()),
            defect_label: None,
        });
    }
    Ok(out)
}

/// Marks a patch defective when at least `min_fraction` of its superpixel
/// overlaps the defect mask.
pub fn label_patches(patches: &mut [PatchSample], spmap: &SuperpixelMap, defects: &BinaryMask, min_fraction: f64) -> Result<()> {
    if defects.shape() != (spmap.height, spmap.width) {
        return Err(Error::Shape("defect mask does not match superpixel map".into()));
    }
    let mut count = vec![0usize; spmap.len()];
    let mut hit = vec![0usize; spmap.len()];
    for (&l, &d) in spmap.labels.iter().zip(defects.bits()) {
        count[l as usize] += 1;
        hit[l as usize] += d as usize;
    }
    for p in patches {
        let id = p.sp_id as usize;
        p.defect_label = Some(hit[id] > 0 && hit[id] as f64 >= min_fraction * count[id] as f64);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::rgb_to_lab;
    use crate::ingest::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn lab_fill(h: usize, w: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> ImageBuffer {
        let mut data = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            for c in 0..w {
                data.extend_from_slice(&f(r, c));
            }
        }
        ImageBuffer::new(h, w, ColorSpace::Lab, data).unwrap()
    }

    fn center(l: f64, a: f64, b: f64, x: f64, y: f64) -> ClusterCenter {
        ClusterCenter { l, a, b, x, y }
    }

    #[test]
    fn grid_seeding() {
        let flat = lab_fill(100, 100, |_, _| [50.0, 0.0, 0.0]);
        let c = init_centers(&flat, 4).unwrap();
        let pos: Vec<(f64, f64)> = c.iter().map(|c| (c.y, c.x)).collect();
        assert_eq!(pos, vec![(25.0, 25.0), (25.0, 75.0), (75.0, 25.0), (75.0, 75.0)]);
        let small = lab_fill(4, 5, |r, c| [(r * 5 + c) as f32, 0.0, 0.0]);
        assert_eq!(init_centers(&small, 20).unwrap().len(), 20);
        assert!(matches!(init_centers(&small, 0), Err(Error::Parameter(_))));
        assert!(init_centers(&small, 21).is_err());
    }

    #[test]
    fn seeds_avoid_edges() {
        // a vertical edge through the grid point pulls the seed off it
        let img = lab_fill(20, 20, |_, c| if c < 10 { [20.0, 0.0, 0.0] } else { [80.0, 0.0, 0.0] });
        let c = init_centers(&img, 1).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].y, c[0].x), (10.0, 11.0));
        let flat = lab_fill(20, 20, |_, _| [50.0, 0.0, 0.0]);
        let c = init_centers(&flat, 1).unwrap();
        assert_eq!((c[0].y, c[0].x), (10.0, 10.0));
    }

    #[test]
    fn distance_examples() {
        let c = center(50.0, 1.0, 2.0, 10.0, 10.0);
        assert_eq!(slic_distance(&c, &c, 10.0, 10.0), 0.0);
        let p = center(50.0, 1.0, 2.0, 13.0, 14.0);
        assert!((slic_distance(&p, &c, 10.0, 10.0) - 5.0).abs() < 1e-12);
        let q = center(53.0, 5.0, 2.0, 10.0, 10.0);
        assert!((slic_distance(&q, &c, 10.0, 10.0) - 5.0).abs() < 1e-12);
        // far from the origin the distance still only depends on the offset
        let far_c = center(0.0, 0.0, 0.0, 500.0, 500.0);
        let far_p = center(0.0, 0.0, 0.0, 503.0, 504.0);
        assert!((slic_distance(&far_p, &far_c, 10.0, 10.0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn quadrants_are_recovered() {
        let colors = [[30.0, 40.0, 10.0], [70.0, -30.0, 20.0], [50.0, 10.0, -40.0], [90.0, 0.0, 0.0]];
        let img = lab_fill(40, 40, |r, c| colors[(r / 20) * 2 + c / 20]);
        let map = slic_segment(&img, &SlicConfig { n_clusters: 4, ..SlicConfig::default() }).unwrap();
        assert_eq!(map.len(), 4);
        for r in 0..40 {
            for c in 0..40 {
                let q = ((r / 20) * 2 + c / 20) as u32;
                assert_eq!(map.label(r, c), q, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn flat_image_gives_even_cells() {
        let img = lab_fill(40, 40, |_, _| [60.0, 5.0, 5.0]);
        let map = slic_segment(&img, &SlicConfig { n_clusters: 4, ..SlicConfig::default() }).unwrap();
        assert_eq!(map.len(), 4);
        // centers sit at 10 and 30; row and column 20 are equidistant and go
        // to the lower index
        assert_eq!(map.sizes(), vec![21 * 21, 21 * 19, 19 * 21, 19 * 19]);
        let one = slic_segment(&img, &SlicConfig { n_clusters: 1, ..SlicConfig::default() }).unwrap();
        assert!(one.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn connectivity_cases() {
        let labels: Vec<u32> = (0..16).map(|i| if i % 4 < 2 { 0 } else { 1 }).collect();
        assert_eq!(enforce_connectivity(&labels, 4, 4, 1).unwrap(), labels);

        let mut stray = vec![0u32; 25];
        stray[12] = 1;
        stray[0] = 1;
        stray[1] = 1;
        let fixed = enforce_connectivity(&stray, 5, 5, 1).unwrap();
        assert_eq!(fixed[12], 0);
        assert_eq!(fixed[0], 1);

        // a 3-pixel island of its own label: merged at min 4, kept at min 3
        let mut island = vec![0u32; 36];
        for i in [14, 15, 20] {
            island[i] = 2;
        }
        assert!(enforce_connectivity(&island, 6, 6, 4).unwrap().iter().all(|&l| l == 0));
        assert_eq!(enforce_connectivity(&island, 6, 6, 3).unwrap(), island);
    }

    #[test]
    fn patches_respect_coverage() {
        let img = ImageBuffer::filled(20, 20, ColorSpace::Srgb, &[0.2, 0.4, 0.6]).with_source("img");
        let labels: Vec<u32> = (0..400).map(|i| if (i % 20) < 10 { 0 } else { 1 }).collect();
        let spmap = SuperpixelMap {
            height: 20,
            width: 20,
            labels,
            centers: vec![center(0.0, 0.0, 0.0, 5.0, 10.0), center(0.0, 0.0, 0.0, 15.0, 10.0)],
            interval: 10.0,
        };
        assert!(extract_superpixel_patches(&img, &spmap, &BinaryMask::empty(20, 20), 8, 0.6).unwrap().is_empty());
        // blade covers the left half fully and half of the right superpixel
        let blade = BinaryMask::from_fn(20, 20, |r, c| c < 10 || r < 10);
        let patches = extract_superpixel_patches(&img, &spmap, &blade, 8, 0.6).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].sp_id, 0);
        assert_eq!(patches[0].coverage, 1.0);
        assert_eq!(patches[0].image.shape(), (8, 8));
        assert_eq!(patches[0].image_id, "img");
        let loose = extract_superpixel_patches(&img, &spmap, &blade, 8, 0.5).unwrap();
        assert_eq!(loose.len(), 2);
        assert_eq!(loose[1].coverage, 0.5);
    }

    #[test]
    fn patch_fill_uses_superpixel_mean() {
        let img = ImageBuffer::new(
            2,
            2,
            ColorSpace::Srgb,
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.5, 0.5, 0.5],
        )
        .unwrap();
        // superpixel 0 is the diagonal (0,0),(1,1); its box is the whole frame
        let spmap = SuperpixelMap {
            height: 2,
            width: 2,
            labels: vec![0, 1, 1, 0],
            centers: vec![center(0.0, 0.0, 0.0, 0.5, 0.5); 2],
            interval: 1.0,
        };
        let patches = extract_superpixel_patches(&img, &spmap, &BinaryMask::filled(2, 2, true), 2, 0.6).unwrap();
        assert_eq!(patches[0].image.pixel(0, 1), &[0.75, 0.25, 0.25]);
        assert_eq!(patches[0].image.pixel(0, 0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn defect_labels_follow_overlap() {
        let spmap = SuperpixelMap {
            height: 1,
            width: 20,
            labels: (0..20).map(|i| (i / 10) as u32).collect(),
            centers: vec![center(0.0, 0.0, 0.0, 0.0, 0.0); 2],
            interval: 10.0,
        };
        let defects = BinaryMask::from_fn(1, 20, |_, c| c == 3 || c >= 18);
        let img = ImageBuffer::filled(1, 20, ColorSpace::Srgb, &[0.5, 0.5, 0.5]);
        let mut patches = extract_superpixel_patches(&img, &spmap, &BinaryMask::filled(1, 20, true), 4, 0.6).unwrap();
        label_patches(&mut patches, &spmap, &defects, 0.15).unwrap();
        assert_eq!(patches[0].defect_label, Some(false));
        assert_eq!(patches[1].defect_label, Some(true));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = rgb_to_lab(&ImageBuffer::filled(12, 16, ColorSpace::Srgb, &[0.3, 0.6, 0.2])).unwrap();
        let cfg = SlicConfig { n_clusters: 6, ..SlicConfig::default() };
        let map = slic_segment(&img, &cfg).unwrap();
        let (png, json) = (dir.path().join("a.png"), dir.path().join("a.json"));
        map.save(&png, &json, &cfg).unwrap();
        let (back, back_cfg) = SuperpixelMap::load(&png, &json).unwrap();
        assert_eq!(back, map);
        assert_eq!(back_cfg, cfg);
    }

    fn random_texture(seed: u64, h: usize, w: usize) -> ImageBuffer {
        let mut rng = stream_rng(seed, 0);
        // blocky noise so there is structure for the clustering to find
        let blocks: Vec<[f32; 3]> = (0..64)
            .map(|_| [rng.random_range(0.0..100.0), rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)])
            .collect();
        let noise: Vec<f32> = (0..h * w).map(|_| rng.random_range(-5.0..5.0)).collect();
        lab_fill(h, w, |r, c| {
            let b = blocks[(r * 8 / h) * 8 + c * 8 / w];
            [b[0] + noise[r * w + c], b[1], b[2]]
        })
    }

    /// 4×4 grid of random sRGB colours on 32×32 with mild noise.
    fn block_texture(seed: u64) -> ImageBuffer {
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

    /// With only four centers every window spans the whole image, so the
    /// colour term alone decides membership. On fine high-contrast texture a
    /// cluster can then end up as fragments all below `min_region` and vanish.
    #[test]
    fn fine_texture_can_lose_clusters() {
        let img = random_texture(892, 32, 32);
        let cfg = SlicConfig { n_clusters: 4, ..SlicConfig::default() };
        let raw = slic_cluster(&img, &cfg).unwrap();
        let nonempty = raw.sizes().iter().filter(|&&s| s > 0).count();
        assert_eq!(nonempty, 4);
        assert_eq!(slic_segment(&img, &cfg).unwrap().len(), 2);
    }

    fn is_four_connected(map: &SuperpixelMap) -> bool {
        let (_, sizes) = label_components(
            map.height,
            map.width,
            |_| true,
            |a, b| map.labels[a] == map.labels[b],
            Connectivity::Four,
        );
        sizes.len() == map.len()
    }

    fn optimal_fraction(lab: &ImageBuffer, map: &SuperpixelMap, m: f64) -> f64 {
        let (h, w) = lab.shape();
        let mut ok = 0;
        for r in 0..h {
            for c in 0..w {
                let p = ClusterCenter::at(lab, r, c);
                let own = slic_distance(&p, &map.centers[map.label(r, c) as usize], map.interval, m);
                let beaten = map
                    .centers
                    .iter()
                    .filter(|k| in_window(k, map.interval, r, c))
                    .any(|k| slic_distance(&p, k, map.interval, m) < own);
                ok += (!beaten) as usize;
            }
        }
        ok as f64 / (h * w) as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn segmentation_is_a_connected_partition(seed in 0u64..1000, n in 1usize..30) {
            let img = random_texture(seed, 24, 28);
            let map = slic_segment(&img, &SlicConfig { n_clusters: n, ..SlicConfig::default() }).unwrap();
            prop_assert_eq!(map.labels.len(), 24 * 28);
            prop_assert!(map.labels.iter().all(|&l| (l as usize) < map.len()));
            prop_assert!(map.sizes().iter().all(|&s| s > 0));
            prop_assert!(is_four_connected(&map));
        }

        #[test]
        fn assignments_are_locally_optimal(seed in 0u64..1000, n in 2usize..40) {
            let img = random_texture(seed, 32, 32);
            let cfg = SlicConfig { n_clusters: n, ..SlicConfig::default() };
            let raw = slic_cluster(&img, &cfg).unwrap();
            prop_assert_eq!(optimal_fraction(&img, &raw, 10.0), 1.0);
            // after enforcement the only suboptimal pixels are relabelled ones
            let map = slic_segment(&img, &cfg).unwrap();
            let relabelled = raw
                .labels
                .iter()
                .zip(&map.labels)
                .filter(|&(&a, &b)| raw.centers[a as usize] != map.centers[b as usize])
                .count();
            let suboptimal = ((1.0 - optimal_fraction(&img, &map, 10.0)) * 1024.0).round() as usize;
            prop_assert!(suboptimal <= relabelled, "{suboptimal} suboptimal, {relabelled} relabelled");
        }

        #[test]
        fn cluster_count_tracks_request(seed in 0u64..1000, n in prop::sample::select(vec![4usize, 9, 16])) {
            let img = rgb_to_lab(&block_texture(seed)).unwrap();
            let map = slic_segment(&img, &SlicConfig { n_clusters: n, ..SlicConfig::default() }).unwrap();
            let k = map.len() as f64;
            prop_assert!((k - n as f64).abs() <= 0.3 * n as f64, "{k} clusters for n = {n}");
        }

        #[test]
        fn distance_is_symmetric_and_zero_only_on_coincidence(
            p in proptest::array::uniform5(-50.0f64..50.0),
            q in proptest::array::uniform5(-50.0f64..50.0),
        ) {
            let a = center(p[0], p[1], p[2], p[3], p[4]);
            let b = center(q[0], q[1], q[2], q[3], q[4]);
            prop_assert!((slic_distance(&a, &b, 7.0, 10.0) - slic_distance(&b, &a, 7.0, 10.0)).abs() < 1e-9);
            prop_assert_eq!(slic_distance(&a, &a, 7.0, 10.0), 0.0);
            if a != b {
                prop_assert!(slic_distance(&a, &b, 7.0, 10.0) > 0.0);
            }
        }
    }
}
