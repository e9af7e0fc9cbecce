//! Binary masks to polygons on the pixel-edge lattice, Douglas-Peucker
//! simplification and GeoJSON export.
//!
//! Coordinates are `[x, y]` in chip pixels with `y` growing downwards. Pixel
//! `(row, col)` covers `[col, col + 1] x [row, row + 1]`. Exterior rings have
//! positive shoelace area and holes negative, which is counter-clockwise and
//! clockwise respectively when the coordinates are read as `[x, y]`.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{write_file, TileId};
use crate::error::{Error, Result};
use crate::raster::BinaryMask;

pub type Ring = Vec<[f64; 2]>;

#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    /// Closed: the first vertex is repeated at the end.
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

impl Polygon {
    /// Shoelace area of the exterior minus the holes.
    pub fn area(&self) -> f64 {
        signed_area(&self.exterior) + self.holes.iter().map(|h| signed_area(h)).sum::<f64>()
    }

    /// Even-odd test over all rings.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        std::iter::once(&self.exterior).chain(&self.holes).filter(|r| crosses(r, x, y)).count() % 2 == 1
    }

    pub fn vertex_count(&self) -> usize {
        self.exterior.len() + self.holes.iter().map(Vec::len).sum::<usize>()
    }
}

pub fn signed_area(ring: &[[f64; 2]]) -> f64 {
    ring.windows(2).map(|w| w[0][0] * w[1][1] - w[1][0] * w[0][1]).sum::<f64>() / 2.0
}

fn crosses(ring: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let ([x0, y0], [x1, y1]) = (w[0], w[1]);
        if (y0 > y) != (y1 > y) && x < x0 + (y - y0) * (x1 - x0) / (y1 - y0) {
            inside = !inside;
        }
    }
    inside
}

/// Component label per pixel (4-connectivity), in row-major discovery order.
pub fn label_components(m: &BinaryMask) -> (Vec<Option<usize>>, usize) {
    let (h, w) = (m.height(), m.width());
    let mut labels = vec![None; h * w];
    let mut n = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !m.values()[start] || labels[start].is_some() {
            continue;
        }
        labels[start] = Some(n);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if m.values()[q] && labels[q].is_none() {
                    labels[q] = Some(n);
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        n += 1;
    }
    (labels, n)
}

type Vertex = (i64, i64);

/// Unit step directions in travel order around a pixel: east, south, west, north.
const DIRS: [Vertex; 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

#[derive(Debug, Clone, Copy)]
struct Edge {
    from: Vertex,
    dir: usize,
}

impl Edge {
    fn to(self) -> Vertex {
        (self.from.0 + DIRS[self.dir].0, self.from.1 + DIRS[self.dir].1)
    }
}

fn trace_component(labels: &[Option<usize>], h: usize, w: usize, comp: usize, pixels: &[usize]) -> Polygon {
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && labels[r as usize * w + c as usize] == Some(comp);
    let mut edges: Vec<Edge> = Vec::new();
    for &p in pixels {
        let (r, c) = ((p / w) as i64, (p % w) as i64);
        if !inside(r - 1, c) {
            edges.push(Edge { from: (c, r), dir: 0 });
        }
        if !inside(r, c + 1) {
            edges.push(Edge { from: (c + 1, r), dir: 1 });
        }
        if !inside(r + 1, c) {
            edges.push(Edge { from: (c + 1, r + 1), dir: 2 });
        }
        if !inside(r, c - 1) {
            edges.push(Edge { from: (c, r + 1), dir: 3 });
        }
    }
    let mut out: HashMap<(Vertex, usize), usize> = HashMap::with_capacity(edges.len());
    for (i, e) in edges.iter().enumerate() {
        out.insert((e.from, e.dir), i);
    }
    // Prefer turning around the pixel just passed, then straight, then away.
    let next = |e: Edge| -> usize {
        let v = e.to();
        [(e.dir + 1) % 4, e.dir, (e.dir + 3) % 4]
            .iter()
            .find_map(|&d| out.get(&(v, d)).copied())
            .expect("boundary edges form closed rings")
    };
    let mut used = vec![false; edges.len()];
    let mut exterior = None;
    let mut holes = Vec::new();
    // edges[0] is the top edge of the first pixel in row-major order
    for start in 0..edges.len() {
        if used[start] {
            continue;
        }
        let mut ring_edges = vec![start];
        used[start] = true;
        let mut cur = next(edges[start]);
        while cur != start {
            used[cur] = true;
            ring_edges.push(cur);
            cur = next(edges[cur]);
        }
        if start != 0 {
            // holes start at their smallest (y, x) vertex
            let k = (0..ring_edges.len())
                .min_by_key(|&i| {
                    let (x, y) = edges[ring_edges[i]].from;
                    (y, x, i)
                })
                .unwrap();
            ring_edges.rotate_left(k);
        }
        let mut ring: Ring = ring_edges.iter().map(|&i| [edges[i].from.0 as f64, edges[i].from.1 as f64]).collect();
        ring.push(ring[0]);
        if start == 0 {
            exterior = Some(ring);
        } else {
            holes.push(ring);
        }
    }
    holes.sort_by(|a, b| (a[0][1], a[0][0]).partial_cmp(&(b[0][1], b[0][0])).unwrap());
    Polygon { exterior: exterior.expect("component has a boundary"), holes }
}

/// One polygon per 4-connected foreground component, in row-major order of
/// each component's first pixel.
pub fn mask_to_polygons(m: &BinaryMask) -> Vec<Polygon> {
    let (labels, n) = label_components(m);
    let mut pixels = vec![Vec::new(); n];
    for (p, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            pixels[*l].push(p);
        }
    }
    pixels
        .iter()
        .enumerate()
        .map(|(comp, px)| trace_component(&labels, m.height(), m.width(), comp, px))
        .collect()
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((p[0] - a[0]).powi(2) + (p[1] - a[1]).powi(2)).sqrt();
    }
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0);
    ((p[0] - a[0] - t * dx).powi(2) + (p[1] - a[1] - t * dy).powi(2)).sqrt()
}

fn dp_mark(pts: &[[f64; 2]], lo: usize, hi: usize, tol: f64, keep: &mut [bool]) {
    if hi <= lo + 1 {
        return;
    }
    let (mut best, mut best_d) = (lo, -1.0);
    for i in lo + 1..hi {
        let d = point_segment_distance(pts[i], pts[lo], pts[hi]);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    if best_d > tol {
        keep[best] = true;
        dp_mark(pts, lo, best, tol, keep);
        dp_mark(pts, best, hi, tol, keep);
    }
}

/// Douglas-Peucker on a closed ring. The first vertex is always kept and the
/// ring is split at the vertex farthest from it.
pub fn simplify_ring(ring: &[[f64; 2]], tol: f64) -> Ring {
    if tol == 0.0 || ring.len() <= 4 {
        return ring.to_vec();
    }
    let n = ring.len() - 1;
    let dist = |i: usize| ((ring[i][0] - ring[0][0]).powi(2) + (ring[i][1] - ring[0][1]).powi(2)).sqrt();
    let far = (1..n).max_by(|&a, &b| dist(a).partial_cmp(&dist(b)).unwrap().then(b.cmp(&a))).unwrap();
    let mut keep = vec![false; ring.len()];
    keep[0] = true;
    keep[far] = true;
    keep[n] = true;
    dp_mark(ring, 0, far, tol, &mut keep);
    dp_mark(ring, far, n, tol, &mut keep);
    ring.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect()
}

fn distinct_vertices(ring: &[[f64; 2]]) -> usize {
    let mut v: Vec<[f64; 2]> = ring.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup();
    v.len()
}

/// Simplifies every ring. Returns `None` (with a warning) when the exterior
/// collapses below three distinct vertices; collapsed holes are dropped.
pub fn simplify(p: &Polygon, tol: f64) -> Result<Option<Polygon>> {
    if !(tol >= 0.0) {
        return Err(Error::Config(format!("simplification tolerance must be non-negative, got {tol}")));
    }
    let exterior = simplify_ring(&p.exterior, tol);
    if distinct_vertices(&exterior) < 3 {
        log::warn!("polygon with {} vertices collapsed under tolerance {tol}; dropped", p.exterior.len());
        return Ok(None);
    }
    let holes = p
        .holes
        .iter()
        .map(|h| simplify_ring(h, tol))
        .filter(|h| {
            let ok = distinct_vertices(h) >= 3;
            if !ok {
                log::warn!("hole collapsed under tolerance {tol}; dropped");
            }
            ok
        })
        .collect();
    Ok(Some(Polygon { exterior, holes }))
}

#[derive(Debug, Serialize, Deserialize)]
struct Geometry {
    #[serde(rename = "type")]
    kind: String,
    coordinates: Vec<Ring>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Properties {
    tile_id: TileId,
}

#[derive(Debug, Serialize, Deserialize)]
struct Feature {
    #[serde(rename = "type")]
    kind: String,
    properties: Properties,
    geometry: Geometry,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureCollection {
    #[serde(rename = "type")]
    kind: String,
    features: Vec<Feature>,
}

/// Canonical GeoJSON text of a feature collection, one feature per polygon.
pub fn geojson_string(polys: &[(TileId, Polygon)]) -> String {
    let fc = FeatureCollection {
        kind: "FeatureCollection".into(),
        features: polys
            .iter()
            .map(|(id, p)| Feature {
                kind: "Feature".into(),
                properties: Properties { tile_id: *id },
                geometry: Geometry {
                    kind: "Polygon".into(),
                    coordinates: std::iter::once(p.exterior.clone()).chain(p.holes.iter().cloned()).collect(),
                },
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&fc).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn to_geojson(polys: &[(TileId, Polygon)], path: &Path) -> Result<()> {
    write_file(path, geojson_string(polys).as_bytes())
}

pub fn parse_geojson(text: &str) -> std::result::Result<Vec<(TileId, Polygon)>, String> {
    let fc: FeatureCollection = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if fc.kind != "FeatureCollection" {
        return Err(format!("expected a FeatureCollection, got {}", fc.kind));
    }
    fc.features
        .into_iter()
        .map(|f| {
            let mut rings = f.geometry.coordinates.into_iter();
            let exterior = rings.next().ok_or("polygon without rings")?;
            Ok((f.properties.tile_id, Polygon { exterior, holes: rings.collect() }))
        })
        .collect()
}

pub fn load_geojson(path: &Path) -> Result<Vec<(TileId, Polygon)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_geojson(&text).map_err(|msg| Error::Format { path: path.to_path_buf(), msg })
}
