//! Positive/negative tile classification and the context dictionary.
//!
//! A context is a nearby tile with no point labels. Contexts are found by
//! scanning Chebyshev rings around a positive tile (8 tiles at distance 1,
//! 16 at distance 2, ...), row-major inside each ring, until `k` negatives
//! are collected or the grid runs out.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{write_file, DatasetIndex, TileId};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 8;
pub const CONTEXT_MAP_FILE: &str = "context_map.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileGrid {
    pub rows: usize,
    pub cols: usize,
    pub positives: BTreeSet<TileId>,
    /// Grid cells without a chip. Never used as contexts.
    pub absent: BTreeSet<TileId>,
}

impl TileGrid {
    pub fn new(rows: usize, cols: usize, positives: impl IntoIterator<Item = TileId>) -> Self {
        Self {
            rows,
            cols,
            positives: positives.into_iter().collect(),
            absent: BTreeSet::new(),
        }
    }

    pub fn is_positive(&self, id: TileId) -> bool {
        self.positives.contains(&id)
    }

    pub fn is_negative(&self, id: TileId) -> bool {
        id.0 < self.rows && id.1 < self.cols && !self.positives.contains(&id) && !self.absent.contains(&id)
    }

    pub fn negative_count(&self) -> usize {
        self.rows * self.cols - self.positives.len() - self.absent.len()
    }
}

/// A tile is positive iff its chip carries at least one point.
pub fn classify_tiles(idx: &DatasetIndex) -> TileGrid {
    let mut grid = TileGrid::new(
        idx.grid_rows,
        idx.grid_cols,
        idx.positives().map(|c| c.tile_id),
    );
    let present: BTreeSet<TileId> = idx.chips.iter().map(|c| c.tile_id).collect();
    for r in 0..idx.grid_rows {
        for c in 0..idx.grid_cols {
            if !present.contains(&TileId(r, c)) {
                grid.absent.insert(TileId(r, c));
            }
        }
    }
    grid
}

/// Tiles at exactly Chebyshev distance `ring` from `origin`, row-major, clipped to the grid.
fn ring_tiles(rows: usize, cols: usize, origin: TileId, ring: usize) -> impl Iterator<Item = TileId> {
    let (r0, c0) = (origin.0 as isize, origin.1 as isize);
    let d = ring as isize;
    ((r0 - d)..=(r0 + d))
        .filter(move |r| *r >= 0 && *r < rows as isize)
        .flat_map(move |r| {
            let on_edge_row = (r - r0).abs() == d;
            let cols_iter: Box<dyn Iterator<Item = isize>> = if on_edge_row {
                Box::new((c0 - d)..=(c0 + d))
            } else {
                Box::new([c0 - d, c0 + d].into_iter())
            };
            cols_iter
                .filter(move |c| *c >= 0 && *c < cols as isize)
                .map(move |c| TileId(r as usize, c as usize))
        })
}

pub fn find_contexts(grid: &TileGrid, origin: TileId, k: usize) -> Result<Vec<TileId>> {
    if !grid.is_positive(origin) {
        return Err(Error::Contract(format!(
            "context search origin {origin} is not a positive tile"
        )));
    }
    if k == 0 {
        return Err(Error::Contract("context count k must be >= 1".into()));
    }
    let max_ring = (origin.0.max(grid.rows - 1 - origin.0)).max(origin.1.max(grid.cols - 1 - origin.1));
    let mut found = Vec::with_capacity(k);
    for ring in 1..=max_ring {
        found.extend(ring_tiles(grid.rows, grid.cols, origin, ring).filter(|t| grid.is_negative(*t)));
        if found.len() >= k {
            break;
        }
    }
    found.truncate(k);
    Ok(found)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextMap {
    pub k: usize,
    pub entries: BTreeMap<TileId, Vec<TileId>>,
}

pub fn build_context_map(grid: &TileGrid, k: usize) -> Result<ContextMap> {
    if !grid.positives.is_empty() && grid.negative_count() == 0 {
        return Err(Error::Preprocess(format!(
            "{} positive tiles but no negative tile to use as context",
            grid.positives.len()
        )));
    }
    let mut entries = BTreeMap::new();
    for &p in &grid.positives {
        entries.insert(p, find_contexts(grid, p, k)?);
    }
    Ok(ContextMap { k, entries })
}

/// Uniform draw from the contexts of `tile`.
pub fn sample_context<R: Rng + ?Sized>(map: &ContextMap, tile: TileId, rng: &mut R) -> Result<TileId> {
    let list = map
        .entries
        .get(&tile)
        .ok_or_else(|| Error::Lookup(format!("tile {tile} has no context entry")))?;
    if list.is_empty() {
        return Err(Error::Lookup(format!("tile {tile} has an empty context list")));
    }
    Ok(list[rng.gen_range(0..list.len())])
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextMapFile {
    k: usize,
    entries: BTreeMap<String, Vec<TileId>>,
}

impl ContextMap {
    pub fn to_json(&self) -> String {
        let file = ContextMapFile {
            k: self.k,
            entries: self.entries.iter().map(|(t, v)| (t.key(), v.clone())).collect(),
        };
        serde_json::to_string_pretty(&file).expect("context map serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let file: ContextMapFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut entries = BTreeMap::new();
        for (key, list) in file.entries {
            let id = TileId::parse_key(&key).ok_or_else(|| format!("bad tile key `{key}`"))?;
            entries.insert(id, list);
        }
        Ok(Self { k: file.k, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|msg| Error::Preprocess(format!("{}: {msg}", path.display())))
    }
}
