//! On-disk dataset layout: 8-bit PNG chips and masks plus a JSON index.
//!
//! ```text
//! <root>/index.json
//! <root>/chips/<r>_<c>.png     RGB imagery
//! <root>/masks/<r>_<c>.png     optional ground truth, gray {0, 255}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, GrayImage, ImageBuffer, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, Raster, SoftMask};

pub const INDEX_FILE: &str = "index.json";

/// Grid position of a chip, `(row, col)`. Orders row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileId(pub usize, pub usize);

impl TileId {
    pub fn row(self) -> usize {
        self.0
    }

    pub fn col(self) -> usize {
        self.1
    }

    /// `"r_c"`, used for file names and JSON object keys.
    pub fn key(self) -> String {
        format!("{}_{}", self.0, self.1)
    }

    pub fn parse_key(key: &str) -> Option<TileId> {
        let (r, c) = key.split_once('_')?;
        Some(TileId(r.parse().ok()?, c.parse().ok()?))
    }

    pub fn chebyshev(self, other: TileId) -> usize {
        self.0.abs_diff(other.0).max(self.1.abs_diff(other.1))
    }
}

impl fmt::Display for TileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.0, self.1)
    }
}

/// Chip-local pixel coordinate, serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChipRecord {
    pub tile_id: TileId,
    /// Path relative to the dataset root.
    pub image: String,
    pub points: Vec<Point>,
    pub gt_mask: Option<String>,
}

impl ChipRecord {
    pub fn is_positive(&self) -> bool {
        !self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub tile_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub chips: Vec<ChipRecord>,
}

impl DatasetIndex {
    /// Checks the grid and point invariants and puts chips in row-major order.
    pub fn validate(&mut self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::Index("field `tile_size` must be > 0".into()));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::Index(
                "fields `grid_rows` and `grid_cols` must be >= 1".into(),
            ));
        }
        self.chips.sort_by_key(|c| c.tile_id);
        let mut seen = BTreeSet::new();
        let size = self.tile_size as f64;
        for chip in &self.chips {
            let TileId(r, c) = chip.tile_id;
            if r >= self.grid_rows || c >= self.grid_cols {
                return Err(Error::Index(format!(
                    "field `tile_id` {} outside {}x{} grid",
                    chip.tile_id, self.grid_rows, self.grid_cols
                )));
            }
            if !seen.insert(chip.tile_id) {
                return Err(Error::Index(format!(
                    "field `tile_id` {} is duplicated",
                    chip.tile_id
                )));
            }
            for p in &chip.points {
                if !(0.0..size).contains(&p.x) || !(0.0..size).contains(&p.y) {
                    return Err(Error::Index(format!(
                        "field `points` of chip {}: ({}, {}) outside [0, {})",
                        chip.tile_id, p.x, p.y, self.tile_size
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn chip(&self, id: TileId) -> Option<&ChipRecord> {
        self.chips
            .binary_search_by_key(&id, |c| c.tile_id)
            .ok()
            .map(|i| &self.chips[i])
    }

    pub fn positives(&self) -> impl Iterator<Item = &ChipRecord> {
        self.chips.iter().filter(|c| c.is_positive())
    }
}

pub fn load_index(path: impl AsRef<Path>) -> Result<DatasetIndex> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut idx: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    idx.validate()?;
    Ok(idx)
}

pub fn save_index(idx: &DatasetIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut canonical = idx.clone();
    canonical.validate()?;
    let text = serde_json::to_string_pretty(&canonical).map_err(|e| Error::json(path, e))?;
    write_file(path, text.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn open_png(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Reads an 8-bit gray or RGB PNG; each byte `v` becomes `v / 255`.
pub fn load_chip(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let img = open_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color() {
        ColorType::L8 => {
            let data = img.into_luma8().into_raw();
            Raster::new(h, w, 1, data.into_iter().map(byte_to_unit).collect())
        }
        ColorType::Rgb8 => {
            let data = img.into_rgb8().into_raw();
            Raster::new(h, w, 3, data.into_iter().map(byte_to_unit).collect())
        }
        other => Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected 8-bit gray or RGB, found {other:?}"),
        }),
    }
}

#[inline]
fn byte_to_unit(v: u8) -> f32 {
    f32::from(v) / 255.0
}

#[inline]
fn unit_to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a 1- or 3-channel raster as 8-bit PNG, `round(v * 255)`.
pub fn save_chip(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = r.data().iter().map(|v| unit_to_byte(*v)).collect();
    let (w, h) = (r.width() as u32, r.height() as u32);
    let img = match r.channels() {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, bytes).expect("sized buffer")),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, bytes).expect("sized buffer")),
        c => {
            return Err(Error::Contract(format!(
                "cannot encode {c}-channel raster as PNG"
            )))
        }
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                path: path.to_path_buf(),
                msg: other.to_string(),
            },
        })
}

/// Reads a gray PNG mask; bytes >= 128 are foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let r = load_chip(path)?;
    if r.channels() != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "mask must be single-channel".into(),
        });
    }
    BinaryMask::new(
        r.height(),
        r.width(),
        r.data().iter().map(|v| *v >= 0.5).collect(),
    )
}

/// Writes a binary mask as gray {0, 255}.
pub fn save_mask(m: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    save_chip(&m.to_raster(), path)
}

pub fn save_soft_mask(m: &SoftMask, path: impl AsRef<Path>) -> Result<()> {
    save_chip(&m.to_raster(), path)
}

pub fn load_soft_mask(path: impl AsRef<Path>) -> Result<SoftMask> {
    let path = path.as_ref();
    let r = load_chip(path)?;
    if r.channels() != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "mask must be single-channel".into(),
        });
    }
    SoftMask::new(r.height(), r.width(), r.into_data())
}

/// Relative chip path in the standard layout.
pub fn chip_rel_path(id: TileId) -> String {
    format!("chips/{}.png", id.key())
}

pub fn mask_rel_path(id: TileId) -> String {
    format!("masks/{}.png", id.key())
}

/// A dataset with every chip (and ground truth, when present) decoded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
    pub images: BTreeMap<TileId, Raster>,
    pub gt: BTreeMap<TileId, BinaryMask>,
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let index = load_index(root.join(INDEX_FILE))?;
        let mut images = BTreeMap::new();
        let mut gt = BTreeMap::new();
        for chip in &index.chips {
            let img = load_chip(root.join(&chip.image))?;
            if img.height() != index.tile_size || img.width() != index.tile_size {
                return Err(Error::Index(format!(
                    "chip {} is {}x{}, expected tile_size {}",
                    chip.tile_id,
                    img.height(),
                    img.width(),
                    index.tile_size
                )));
            }
            images.insert(chip.tile_id, img);
            if let Some(m) = &chip.gt_mask {
                gt.insert(chip.tile_id, load_mask(root.join(m))?);
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            index,
            images,
            gt,
        })
    }

    /// Builds a dataset from already decoded data (no files involved).
    pub fn from_parts(
        mut index: DatasetIndex,
        images: BTreeMap<TileId, Raster>,
        gt: BTreeMap<TileId, BinaryMask>,
    ) -> Result<Self> {
        index.validate()?;
        for chip in &index.chips {
            if !images.contains_key(&chip.tile_id) {
                return Err(Error::Index(format!("no image for chip {}", chip.tile_id)));
            }
        }
        Ok(Self {
            root: PathBuf::new(),
            index,
            images,
            gt,
        })
    }

    pub fn image(&self, id: TileId) -> Result<&Raster> {
        self.images
            .get(&id)
            .ok_or_else(|| Error::Lookup(format!("no image for chip {id}")))
    }
}

/// Bytes of a PNG after the 8-bit encoder, for byte-exact comparisons in tests.
pub fn encode_png_bytes(r: &Raster) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = r.data().iter().map(|v| unit_to_byte(*v)).collect();
    let mut out = std::io::Cursor::new(Vec::new());
    let (w, h) = (r.width() as u32, r.height() as u32);
    let res = match r.channels() {
        1 => ImageBuffer::<image::Luma<u8>, _>::from_raw(w, h, bytes)
            .expect("sized buffer")
            .write_to(&mut out, image::ImageFormat::Png),
        3 => ImageBuffer::<image::Rgb<u8>, _>::from_raw(w, h, bytes)
            .expect("sized buffer")
            .write_to(&mut out, image::ImageFormat::Png),
        c => {
            return Err(Error::Contract(format!(
                "cannot encode {c}-channel raster as PNG"
            )))
        }
    };
    res.map_err(|e| Error::Contract(e.to_string()))?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn black_and_white_chips_load_exactly() {
        let dir = tmp();
        for (v, expect) in [(0u8, 0.0f32), (255, 1.0)] {
            let p = dir.path().join(format!("{v}.png"));
            RgbImage::from_pixel(4, 4, image::Rgb([v, v, v])).save(&p).unwrap();
            let r = load_chip(&p).unwrap();
            assert_eq!((r.height(), r.width(), r.channels()), (4, 4, 3));
            assert!(r.data().iter().all(|x| *x == expect));
        }
    }

    #[test]
    fn half_grey_writes_128() {
        let dir = tmp();
        let p = dir.path().join("half.png");
        save_chip(&Raster::filled(3, 5, 3, 0.5), &p).unwrap();
        let img = image::open(&p).unwrap().into_rgb8();
        assert!(img.into_raw().iter().all(|b| *b == 128));
        for (v, byte) in [(0.0, 0u8), (1.0, 255)] {
            save_chip(&Raster::filled(2, 2, 1, v), &p).unwrap();
            let img = image::open(&p).unwrap().into_luma8();
            assert!(img.into_raw().iter().all(|b| *b == byte));
        }
    }

    #[test]
    fn chip_round_trip_is_bit_identical() {
        let dir = tmp();
        let p = dir.path().join("rt.png");
        let data: Vec<f32> = (0..6 * 7 * 3).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        let r = Raster::new(6, 7, 3, data).unwrap();
        save_chip(&r, &p).unwrap();
        let a = load_chip(&p).unwrap();
        save_chip(&a, &p).unwrap();
        let b = load_chip(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, r);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_chip("/nonexistent/x.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }

    #[test]
    fn sixteen_bit_png_is_format_error() {
        let dir = tmp();
        let p = dir.path().join("deep.png");
        ImageBuffer::<image::Luma<u16>, _>::from_pixel(2, 2, image::Luma([1000u16]))
            .save(&p)
            .unwrap();
        let err = load_chip(&p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn index_round_trip_and_sorting() {
        let dir = tmp();
        let p = dir.path().join(INDEX_FILE);
        let text = r#"{"tile_size": 8, "grid_rows": 2, "grid_cols": 2, "chips": [
            {"tile_id": [1, 0], "image": "chips/1_0.png", "points": [], "gt_mask": null},
            {"tile_id": [0, 1], "image": "chips/0_1.png", "points": [[1.5, 2.0]], "gt_mask": "masks/0_1.png"}
        ]}"#;
        fs::write(&p, text).unwrap();
        let idx = load_index(&p).unwrap();
        assert_eq!(idx.chips[0].tile_id, TileId(0, 1));
        assert_eq!(idx.chips[0].points, vec![Point::new(1.5, 2.0)]);
        save_index(&idx, &p).unwrap();
        let first = fs::read_to_string(&p).unwrap();
        let again = load_index(&p).unwrap();
        assert_eq!(again, idx);
        save_index(&again, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), first);
    }

    #[test]
    fn empty_index_loads() {
        let dir = tmp();
        let p = dir.path().join(INDEX_FILE);
        fs::write(&p, r#"{"tile_size": 64, "grid_rows": 1, "grid_cols": 1, "chips": []}"#).unwrap();
        assert!(load_index(&p).unwrap().chips.is_empty());
    }

    #[test]
    fn schema_violations_are_reported() {
        let dir = tmp();
        let p = dir.path().join(INDEX_FILE);
        let dup = r#"{"tile_size": 8, "grid_rows": 2, "grid_cols": 2, "chips": [
            {"tile_id": [0, 0], "image": "a.png", "points": [], "gt_mask": null},
            {"tile_id": [0, 0], "image": "b.png", "points": [], "gt_mask": null}]}"#;
        fs::write(&p, dup).unwrap();
        let msg = load_index(&p).unwrap_err().to_string();
        assert!(msg.contains("tile_id") && msg.contains("duplicated"), "{msg}");

        fs::write(&p, r#"{"grid_rows": 2, "grid_cols": 2, "chips": []}"#).unwrap();
        let msg = load_index(&p).unwrap_err().to_string();
        assert!(msg.contains("tile_size"), "{msg}");

        let outside = r#"{"tile_size": 8, "grid_rows": 1, "grid_cols": 1, "chips": [
            {"tile_id": [0, 0], "image": "a.png", "points": [[8.0, 1.0]], "gt_mask": null}]}"#;
        fs::write(&p, outside).unwrap();
        let msg = load_index(&p).unwrap_err().to_string();
        assert!(msg.contains("points"), "{msg}");
    }

    #[test]
    fn tile_keys_parse_back() {
        let id = TileId(12, 3);
        assert_eq!(TileId::parse_key(&id.key()), Some(id));
        assert_eq!(TileId::parse_key("x_1"), None);
    }
}
