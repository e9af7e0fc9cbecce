//! Deterministic synthetic scenes: a smooth textured background cut into
//! tiles, with solid-coloured ellipses and rounded rectangles on a fraction
//! of them, point labels at object centroids and exact ground-truth masks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::{ImageBuffer, Rgb};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{chip_rel_path, mask_rel_path, save_chip, save_index, save_mask, ChipRecord, Dataset, DatasetIndex, Point, TileId, INDEX_FILE};
use crate::error::{Error, Result};
use crate::polygonize::label_components;
use crate::raster::{BinaryMask, Raster};

/// Largest Chebyshev distance at which every positive tile must see a negative one.
pub const MAX_CONTEXT_RING: usize = 3;
pub const TRAIN_DIR: &str = "train";
pub const TEST_DIR: &str = "test";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectKind {
    Ellipse,
    RoundedRect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Grid of the held-out split.
    pub test_grid_rows: usize,
    pub test_grid_cols: usize,
    pub tile_size: usize,
    /// Fraction of tiles that carry objects.
    pub object_density: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub object_kinds: Vec<ObjectKind>,
    /// Semi-axis range in px.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Gaussian smoothing of the background noise, in px.
    pub background_correlation: f64,
    /// Standard deviation of the smoothed background around its base colour.
    pub background_contrast: f64,
    /// Lattice spacing, in px, over which the base colour drifts; 0 keeps one
    /// base colour for the whole raster.
    pub background_tint_scale: f64,
    /// Minimum RGB distance between an object and the background mean around it.
    pub color_separation: f64,
    /// Width of the anti-aliased rim outside each object, in px.
    pub edge_softness: f64,
    /// Standard deviation of the point label around the object centroid, in px.
    pub centroid_jitter: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid_rows: 16,
            grid_cols: 16,
            test_grid_rows: 8,
            test_grid_cols: 8,
            tile_size: 64,
            object_density: 0.25,
            min_objects: 1,
            max_objects: 3,
            object_kinds: vec![ObjectKind::Ellipse, ObjectKind::RoundedRect],
            min_radius: 5.0,
            max_radius: 10.0,
            background_correlation: 6.0,
            background_contrast: 0.08,
            background_tint_scale: 192.0,
            color_separation: 0.35,
            edge_softness: 1.0,
            centroid_jitter: 1.5,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_rows == 0 || self.grid_cols == 0 || self.test_grid_rows == 0 || self.test_grid_cols == 0 {
            return bad("grid dimensions must be positive".into());
        }
        if self.tile_size == 0 || self.tile_size % 8 != 0 {
            return bad(format!("tile_size must be a positive multiple of 8, got {}", self.tile_size));
        }
        if !(0.0..1.0).contains(&self.object_density) {
            return bad(format!("object_density must lie in [0, 1), got {}", self.object_density));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad(format!("object count range {}..={} is invalid", self.min_objects, self.max_objects));
        }
        if self.object_kinds.is_empty() {
            return bad("object_kinds must not be empty".into());
        }
        if !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius) {
            return bad(format!("radius range {}..{} is invalid", self.min_radius, self.max_radius));
        }
        let span = 2.0 * (self.max_radius * std::f64::consts::SQRT_2 + self.edge_softness + 1.0);
        if span > self.tile_size as f64 {
            return bad(format!("objects of radius {} do not fit {} px tiles", self.max_radius, self.tile_size));
        }
        for (name, v) in [
            ("background_correlation", self.background_correlation),
            ("background_contrast", self.background_contrast),
            ("background_tint_scale", self.background_tint_scale),
            ("edge_softness", self.edge_softness),
            ("centroid_jitter", self.centroid_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.color_separation >= 0.0 && self.color_separation <= 0.8) {
            return bad(format!("color_separation must lie in [0, 0.8], got {}", self.color_separation));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: ObjectKind,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Shape {
    fn bound(&self) -> f64 {
        match self.kind {
            ObjectKind::Ellipse => self.a.max(self.b),
            ObjectKind::RoundedRect => self.a.hypot(self.b),
        }
    }

    /// Approximate signed distance in px; negative inside.
    fn distance(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ObjectKind::Ellipse => {
                let (s, c) = self.angle.sin_cos();
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                ((u / self.a).hypot(v / self.b) - 1.0) * self.a.min(self.b)
            }
            ObjectKind::RoundedRect => {
                let r = 0.4 * self.a.min(self.b);
                let qx = dx.abs() - (self.a - r);
                let qy = dy.abs() - (self.b - r);
                qx.max(0.0).hypot(qy.max(0.0)) + qx.max(qy).min(0.0) - r
            }
        }
    }
}

/// One generated raster, tiled.
#[derive(Debug, Clone)]
pub struct Scene {
    pub index: DatasetIndex,
    pub images: BTreeMap<TileId, Raster>,
    pub gt: BTreeMap<TileId, BinaryMask>,
    /// Objects placed on each positive tile.
    pub object_counts: BTreeMap<TileId, usize>,
}

impl Scene {
    pub fn into_dataset(self) -> Result<Dataset> {
        Dataset::from_parts(self.index, self.images, self.gt)
    }
}

fn smooth_background(rng: &mut ChaCha8Rng, h: usize, w: usize, cfg: &SceneConfig) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let noise: Vec<f32> = (0..h * w * 3).map(|_| normal.sample(rng)).collect();
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(w as u32, h as u32, noise).expect("buffer size");
    let smooth = if cfg.background_correlation > 0.0 {
        image::imageops::blur(&buf, cfg.background_correlation as f32).into_raw()
    } else {
        buf.into_raw()
    };
    let mut out = vec![0.0f32; h * w * 3];
    for c in 0..3 {
        let vals: Vec<f64> = smooth.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt().max(1e-12);
        let base = tint_field(rng, h, w, cfg.background_tint_scale);
        for (i, v) in vals.iter().enumerate() {
            out[i * 3 + c] = (base[i] + cfg.background_contrast * (v - mean) / std).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Base colour of one channel: uniform draws on a lattice with `scale` px
/// spacing, bilinearly interpolated.
fn tint_field(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> Vec<f64> {
    if scale <= 0.0 {
        return vec![rng.gen_range(0.3..0.7); h * w];
    }
    let ny = (h as f64 / scale).ceil() as usize + 1;
    let nx = (w as f64 / scale).ceil() as usize + 1;
    let nodes: Vec<f64> = (0..ny * nx).map(|_| rng.gen_range(0.3..0.7)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / scale;
        let (y0, ty) = ((fy.floor() as usize).min(ny - 2), fy - fy.floor());
        for x in 0..w {
            let fx = x as f64 / scale;
            let (x0, tx) = ((fx.floor() as usize).min(nx - 2), fx - fx.floor());
            let at = |r: usize, c: usize| nodes[r * nx + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Picks `round(density * n)` positive tiles, then demotes any positive that
/// has no negative within [`MAX_CONTEXT_RING`].
fn layout(rng: &mut ChaCha8Rng, rows: usize, cols: usize, density: f64) -> BTreeSet<TileId> {
    let mut all: Vec<TileId> = (0..rows).flat_map(|r| (0..cols).map(move |c| TileId(r, c))).collect();
    all.shuffle(rng);
    let n = (density * (rows * cols) as f64).round() as usize;
    let mut pos: BTreeSet<TileId> = all.into_iter().take(n).collect();
    loop {
        let lonely = pos.iter().copied().find(|&t| {
            !(0..rows)
                .flat_map(|r| (0..cols).map(move |c| TileId(r, c)))
                .any(|o| !pos.contains(&o) && o.chebyshev(t) <= MAX_CONTEXT_RING)
        });
        match lonely {
            Some(t) => {
                pos.remove(&t);
            }
            None => return pos,
        }
    }
}

fn place_shapes(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Vec<Shape> {
    let t = cfg.tile_size as f64;
    let margin = cfg.edge_softness + 1.0;
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..200 {
            let kind = *cfg.object_kinds.choose(rng).expect("non-empty kinds");
            let a = rng.gen_range(cfg.min_radius..=cfg.max_radius);
            let b = rng.gen_range(cfg.min_radius..=cfg.max_radius);
            let angle = match kind {
                ObjectKind::Ellipse => rng.gen_range(0.0..std::f64::consts::PI),
                ObjectKind::RoundedRect => 0.0,
            };
            let mut s = Shape { kind, cx: 0.0, cy: 0.0, a, b, angle };
            let r = s.bound() + margin;
            s.cx = rng.gen_range(r..=t - r);
            s.cy = rng.gen_range(r..=t - r);
            if shapes.iter().all(|o| (o.cx - s.cx).hypot(o.cy - s.cy) > o.bound() + s.bound() + 2.0 * margin + 1.0) {
                shapes.push(s);
                break;
            }
        }
    }
    shapes
}

/// Uniform colour at least `sep` (RGB distance) away from `bg`; falls back
/// to the farthest cube corner.
fn object_color(rng: &mut ChaCha8Rng, bg: [f64; 3], sep: f64) -> [f64; 3] {
    let dist = |c: [f64; 3]| ((c[0] - bg[0]).powi(2) + (c[1] - bg[1]).powi(2) + (c[2] - bg[2]).powi(2)).sqrt();
    for _ in 0..1000 {
        let c = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        if dist(c) >= sep {
            return c;
        }
    }
    bg.map(|v| if v < 0.5 { 1.0 } else { 0.0 })
}

/// Quantization margin so separation survives 8-bit encoding.
const SEP_MARGIN: f64 = 0.01;

/// Generates one tiled raster in memory.
pub fn generate_scene(cfg: &SceneConfig, rows: usize, cols: usize, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts = cfg.tile_size;
    let (h, w) = (rows * ts, cols * ts);
    let bg = smooth_background(&mut rng, h, w, cfg);
    let positives = layout(&mut rng, rows, cols, cfg.object_density);
    let jitter = Normal::new(0.0, cfg.centroid_jitter.max(f64::MIN_POSITIVE)).expect("valid std");

    let mut images = BTreeMap::new();
    let mut gt = BTreeMap::new();
    let mut chips = Vec::new();
    let mut object_counts = BTreeMap::new();
    for r in 0..rows {
        for c in 0..cols {
            let id = TileId(r, c);
            let mut data = Vec::with_capacity(ts * ts * 3);
            for y in 0..ts {
                let start = ((r * ts + y) * w + c * ts) * 3;
                data.extend_from_slice(&bg[start..start + ts * 3]);
            }
            let mut img = Raster::new(ts, ts, 3, data)?;
            let mut mask = BinaryMask::empty(ts, ts);
            let mut points = Vec::new();
            if positives.contains(&id) {
                let shapes = place_shapes(&mut rng, cfg);
                object_counts.insert(id, shapes.len());
                for s in &shapes {
                    let reach = s.bound() + cfg.edge_softness + 1.0;
                    let (y0, y1) = ((s.cy - reach).floor().max(0.0) as usize, ((s.cy + reach).ceil() as usize).min(ts));
                    let (x0, x1) = ((s.cx - reach).floor().max(0.0) as usize, ((s.cx + reach).ceil() as usize).min(ts));
                    let mut local = [0.0f64; 3];
                    for y in y0..y1 {
                        for x in x0..x1 {
                            for (ch, l) in local.iter_mut().enumerate() {
                                *l += img.get(y, x, ch) as f64;
                            }
                        }
                    }
                    let n = ((y1 - y0) * (x1 - x0)) as f64;
                    let colour = object_color(&mut rng, local.map(|v| v / n), cfg.color_separation + SEP_MARGIN);
                    let (mut sx, mut sy, mut count) = (0.0, 0.0, 0usize);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let d = s.distance(x as f64 + 0.5, y as f64 + 0.5);
                            let alpha = if d <= 0.0 {
                                mask.set(y, x, true);
                                sx += x as f64 + 0.5;
                                sy += y as f64 + 0.5;
                                count += 1;
                                1.0
                            } else if d < cfg.edge_softness {
                                1.0 - d / cfg.edge_softness
                            } else {
                                0.0
                            };
                            if alpha > 0.0 {
                                for (ch, &col) in colour.iter().enumerate() {
                                    let v = alpha * col + (1.0 - alpha) * img.get(y, x, ch) as f64;
                                    img.set(y, x, ch, v as f32);
                                }
                            }
                        }
                    }
                    let (mut px, mut py) = (sx / count as f64, sy / count as f64);
                    if cfg.centroid_jitter > 0.0 {
                        px += jitter.sample(&mut rng);
                        py += jitter.sample(&mut rng);
                    }
                    let hi = ts as f64 - 1e-6;
                    points.push(Point::new(px.clamp(0.0, hi), py.clamp(0.0, hi)));
                }
            }
            chips.push(ChipRecord { tile_id: id, image: chip_rel_path(id), points, gt_mask: Some(mask_rel_path(id)) });
            images.insert(id, img);
            gt.insert(id, mask);
        }
    }
    let mut index = DatasetIndex { tile_size: ts, grid_rows: rows, grid_cols: cols, chips };
    index.validate()?;
    Ok(Scene { index, images, gt, object_counts })
}

/// Writes a scene in the standard dataset layout.
pub fn write_scene(scene: &Scene, out_dir: &Path) -> Result<()> {
    for chip in &scene.index.chips {
        save_chip(&scene.images[&chip.tile_id], out_dir.join(&chip.image))?;
        if let Some(m) = &chip.gt_mask {
            save_mask(&scene.gt[&chip.tile_id], out_dir.join(m))?;
        }
    }
    save_index(&scene.index, out_dir.join(INDEX_FILE))
}

/// Generates the training raster into `out_dir`.
pub fn generate_dataset(cfg: &SceneConfig, out_dir: &Path) -> Result<DatasetIndex> {
    let scene = generate_scene(cfg, cfg.grid_rows, cfg.grid_cols, cfg.seed)?;
    write_scene(&scene, out_dir)?;
    Ok(scene.index)
}

fn test_seed(seed: u64) -> u64 {
    seed ^ 0x7e57_5eed_0000_0001
}

/// Writes a training raster to `out/train` and an independently generated
/// held-out raster to `out/test`.
pub fn generate_splits(cfg: &SceneConfig, out_dir: &Path) -> Result<(DatasetIndex, DatasetIndex)> {
    let (train, test) = generate_split_scenes(cfg)?;
    write_scene(&train, &out_dir.join(TRAIN_DIR))?;
    write_scene(&test, &out_dir.join(TEST_DIR))?;
    Ok((train.index, test.index))
}

/// In-memory version of [`generate_splits`].
pub fn generate_split_scenes(cfg: &SceneConfig) -> Result<(Scene, Scene)> {
    let train = generate_scene(cfg, cfg.grid_rows, cfg.grid_cols, cfg.seed)?;
    let test = generate_scene(cfg, cfg.test_grid_rows, cfg.test_grid_cols, test_seed(cfg.seed))?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub positives: usize,
    pub negatives: usize,
    pub points: usize,
    /// 4-connected components over all ground-truth masks.
    pub objects: usize,
    pub mean_object_area: f64,
}

pub fn dataset_stats(index: &DatasetIndex, gt: &BTreeMap<TileId, BinaryMask>) -> DatasetStats {
    let mut s = DatasetStats::default();
    let mut area = 0usize;
    for chip in &index.chips {
        if chip.is_positive() {
            s.positives += 1;
        } else {
            s.negatives += 1;
        }
        s.points += chip.points.len();
        if let Some(m) = gt.get(&chip.tile_id) {
            s.objects += label_components(m).1;
            area += m.count();
        }
    }
    if s.objects > 0 {
        s.mean_object_area = area as f64 / s.objects as f64;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig { grid_rows: 6, grid_cols: 6, test_grid_rows: 4, test_grid_cols: 4, ..Default::default() }
    }

    #[test]
    fn zero_density_has_no_positives() {
        let cfg = SceneConfig { object_density: 0.0, ..small() };
        let s = generate_scene(&cfg, 4, 4, 1).unwrap();
        assert_eq!(s.index.positives().count(), 0);
        assert!(s.gt.values().all(BinaryMask::is_empty));
    }

    #[test]
    fn object_count_matches_components_and_points() {
        let s = generate_scene(&small(), 6, 6, 2).unwrap();
        assert_eq!(s.index.positives().count(), 9);
        for chip in s.index.positives() {
            let n = s.object_counts[&chip.tile_id];
            assert!((1..=3).contains(&n));
            assert_eq!(label_components(&s.gt[&chip.tile_id]).1, n);
            assert_eq!(chip.points.len(), n);
        }
    }

    #[test]
    fn unjittered_points_fall_inside_their_objects() {
        let cfg = SceneConfig { centroid_jitter: 0.0, ..small() };
        let s = generate_scene(&cfg, 6, 6, 3).unwrap();
        for chip in s.index.positives() {
            let m = &s.gt[&chip.tile_id];
            for p in &chip.points {
                assert!(m.get(p.y as usize, p.x as usize), "{:?} outside mask of {}", p, chip.tile_id);
            }
        }
    }

    #[test]
    fn every_positive_sees_a_nearby_negative() {
        let cfg = SceneConfig { object_density: 0.9, ..small() };
        let s = generate_scene(&cfg, 8, 8, 4).unwrap();
        let pos: BTreeSet<TileId> = s.index.positives().map(|c| c.tile_id).collect();
        assert!(!pos.is_empty());
        for &p in &pos {
            assert!(s.index.chips.iter().any(|c| !pos.contains(&c.tile_id) && c.tile_id.chebyshev(p) <= MAX_CONTEXT_RING));
        }
    }

    #[test]
    fn stats_recount() {
        let s = generate_scene(&small(), 6, 6, 5).unwrap();
        let st = dataset_stats(&s.index, &s.gt);
        assert_eq!(st.positives + st.negatives, 36);
        assert_eq!(st.objects, s.object_counts.values().sum::<usize>());
        let area: usize = s.gt.values().map(BinaryMask::count).sum();
        assert!((st.mean_object_area - area as f64 / st.objects as f64).abs() < 1e-12);
        let empty = DatasetIndex { tile_size: 64, grid_rows: 0, grid_cols: 0, chips: vec![] };
        assert_eq!(dataset_stats(&empty, &BTreeMap::new()), DatasetStats::default());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SceneConfig { tile_size: 60, ..small() },
            SceneConfig { object_density: 1.0, ..small() },
            SceneConfig { min_objects: 4, ..small() },
            SceneConfig { max_radius: 40.0, ..small() },
            SceneConfig { object_kinds: vec![], ..small() },
            SceneConfig { background_tint_scale: -1.0, ..small() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn tint_drifts_smoothly_across_the_raster() {
        let flat = SceneConfig { object_density: 0.0, background_contrast: 0.0, ..small() };
        let pixels = |cfg: &SceneConfig| {
            let s = generate_scene(cfg, 4, 4, 5).unwrap();
            let img = &s.images[&TileId(0, 0)];
            let far = &s.images[&TileId(3, 3)];
            (img.get(0, 0, 0), img.get(0, 1, 0), far.get(63, 63, 0))
        };
        let (a, _, far) = pixels(&SceneConfig { background_tint_scale: 0.0, ..flat.clone() });
        assert_eq!(a, far);
        let scale = 64.0;
        let (a, b, far) = pixels(&SceneConfig { background_tint_scale: scale, ..flat });
        assert_ne!(a, far);
        assert!((a - b).abs() as f64 <= 0.4 / scale + 1e-6);
    }
}
