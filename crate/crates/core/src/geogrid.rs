//! Search-grid enumeration over geographic bounding boxes and point-in-region
//! assignment.
//!
//! All coordinates are plain latitude/longitude degrees treated as planar.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Default grid stride in degrees, applied to both axes.
pub const DEFAULT_STRIDE_DEG: f64 = 0.02;

/// Slack, in units of one stride, when counting how many steps fit in a box.
/// Absorbs float error in `(max - min) / stride`.
const STEP_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("invalid grid spec: {field}: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("invalid region set: {0}")]
    InvalidRegions(String),
    #[error("failed to read region file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed GeoJSON in {path}: {reason}")]
    GeoJson { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBoundingBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl GeoBoundingBox {
    pub fn new(min_lat: f64, max_lat: f64, min_lon: f64, max_lon: f64) -> Self {
        Self {
            min_lat,
            max_lat,
            min_lon,
            max_lon,
        }
    }

    /// Checks the box invariants. `label` prefixes the offending field name.
    pub fn validate(&self, label: &str) -> Result<(), GeoError> {
        let fields = [
            ("min_lat", self.min_lat, 90.0),
            ("max_lat", self.max_lat, 90.0),
            ("min_lon", self.min_lon, 180.0),
            ("max_lon", self.max_lon, 180.0),
        ];
        for (name, value, bound) in fields {
            if !value.is_finite() || value.abs() > bound {
                return Err(invalid(
                    format!("{label}.{name}"),
                    format!("{value} outside [-{bound}, {bound}]"),
                ));
            }
        }
        if self.min_lat > self.max_lat {
            return Err(invalid(format!("{label}.min_lat"), "greater than max_lat"));
        }
        if self.min_lon > self.max_lon {
            return Err(invalid(format!("{label}.min_lon"), "greater than max_lon"));
        }
        Ok(())
    }

    pub fn contains(&self, lat: f64, lon: f64, tolerance: f64) -> bool {
        lat >= self.min_lat - tolerance
            && lat <= self.max_lat + tolerance
            && lon >= self.min_lon - tolerance
            && lon <= self.max_lon + tolerance
    }
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> GeoError {
    GeoError::InvalidSpec {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub boxes: Vec<GeoBoundingBox>,
    #[serde(default = "default_stride")]
    pub stride_lat: f64,
    #[serde(default = "default_stride")]
    pub stride_lon: f64,
}

fn default_stride() -> f64 {
    DEFAULT_STRIDE_DEG
}

impl GridSpec {
    pub fn new(boxes: Vec<GeoBoundingBox>) -> Self {
        Self {
            boxes,
            stride_lat: DEFAULT_STRIDE_DEG,
            stride_lon: DEFAULT_STRIDE_DEG,
        }
    }

    pub fn with_stride(mut self, stride_lat: f64, stride_lon: f64) -> Self {
        self.stride_lat = stride_lat;
        self.stride_lon = stride_lon;
        self
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if self.boxes.is_empty() {
            return Err(invalid("boxes", "must not be empty"));
        }
        for (name, stride) in [("stride_lat", self.stride_lat), ("stride_lon", self.stride_lon)] {
            if !(stride.is_finite() && stride > 0.0) {
                return Err(invalid(name, format!("{stride} is not a positive stride")));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate(&format!("boxes[{i}]"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lat: f64,
    pub lon: f64,
}

/// Number of grid steps along one axis, counting the anchor point.
pub fn axis_count(min: f64, max: f64, stride: f64) -> usize {
    ((max - min) / stride + STEP_SLACK).floor() as usize + 1
}

fn dedup_key(p: &GridPoint) -> (i64, i64) {
    ((p.lat * 1e6).round() as i64, (p.lon * 1e6).round() as i64)
}

/// Enumerates grid points box by box, latitude-major, anchored at each box's
/// minimum corner. Points shared by overlapping boxes are emitted once (first
/// occurrence wins, compared at 6-decimal precision).
pub fn enumerate_grid(spec: &GridSpec) -> Result<Vec<GridPoint>, GeoError> {
    spec.validate()?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for b in &spec.boxes {
        let n_lat = axis_count(b.min_lat, b.max_lat, spec.stride_lat);
        let n_lon = axis_count(b.min_lon, b.max_lon, spec.stride_lon);
        for i in 0..n_lat {
            let lat = b.min_lat + i as f64 * spec.stride_lat;
            for j in 0..n_lon {
                let p = GridPoint {
                    lat,
                    lon: b.min_lon + j as f64 * spec.stride_lon,
                };
                if seen.insert(dedup_key(&p)) {
                    out.push(p);
                }
            }
        }
    }
    Ok(out)
}

/// A polygon with one exterior ring and optional holes. Rings are stored as
/// `(lat, lon)` vertices without the repeated closing vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Vec<(f64, f64)>,
    #[serde(default)]
    pub holes: Vec<Vec<(f64, f64)>>,
}

impl Polygon {
    pub fn new(exterior: Vec<(f64, f64)>) -> Self {
        Self {
            exterior: open_ring(exterior),
            holes: Vec::new(),
        }
    }

    /// Boundary-inclusive containment; a point on a hole's edge counts as inside.
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        match ring_position(&self.exterior, lat, lon) {
            RingPosition::Outside => false,
            RingPosition::Boundary => true,
            RingPosition::Inside => self
                .holes
                .iter()
                .all(|h| ring_position(h, lat, lon) != RingPosition::Inside),
        }
    }

    pub fn rings(&self) -> impl Iterator<Item = &Vec<(f64, f64)>> {
        std::iter::once(&self.exterior).chain(self.holes.iter())
    }
}

fn open_ring(mut ring: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RingPosition {
    Inside,
    Boundary,
    Outside,
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let scale = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1.0);
    if cross.abs() > 1e-12 * scale {
        return false;
    }
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

/// Even-odd crossing test with an explicit boundary check.
fn ring_position(ring: &[(f64, f64)], lat: f64, lon: f64) -> RingPosition {
    let n = ring.len();
    if n < 3 {
        return RingPosition::Outside;
    }
    let p = (lat, lon);
    let mut inside = false;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        if on_segment(a, b, p) {
            return RingPosition::Boundary;
        }
        // Cast a ray towards +lon.
        if (a.0 > lat) != (b.0 > lat) {
            let lon_at = a.1 + (lat - a.0) * (b.1 - a.1) / (b.0 - a.0);
            if lon < lon_at {
                inside = !inside;
            }
        }
    }
    if inside {
        RingPosition::Inside
    } else {
        RingPosition::Outside
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub polygons: Vec<Polygon>,
}

impl Region {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        self.polygons.iter().any(|poly| poly.contains(lat, lon))
    }
}

/// Named regions in declaration order. Earlier regions win ties.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    regions: Vec<Region>,
}

impl RegionSet {
    pub fn new(regions: Vec<Region>) -> Result<Self, GeoError> {
        let mut names = HashSet::new();
        for r in &regions {
            if !names.insert(r.name.as_str()) {
                return Err(GeoError::InvalidRegions(format!("duplicate region name {:?}", r.name)));
            }
            for poly in &r.polygons {
                for ring in poly.rings() {
                    if ring.len() < 3 {
                        return Err(GeoError::InvalidRegions(format!(
                            "region {:?} has a ring with {} vertices",
                            r.name,
                            ring.len()
                        )));
                    }
                }
            }
        }
        Ok(Self { regions })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Loads a GeoJSON FeatureCollection of Polygon/MultiPolygon features,
    /// each carrying a `"name"` property.
    pub fn from_geojson_file(path: impl AsRef<Path>) -> Result<Self, GeoError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| GeoError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_geojson_str(&text).map_err(|e| match e {
            GeoError::GeoJson { reason, .. } => GeoError::GeoJson {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_geojson_str(text: &str) -> Result<Self, GeoError> {
        let bad = |reason: String| GeoError::GeoJson {
            path: "<string>".into(),
            reason,
        };
        let root: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
            return Err(bad("top-level object is not a FeatureCollection".into()));
        }
        let features = root
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing features array".into()))?;
        let mut regions = Vec::with_capacity(features.len());
        for (i, f) in features.iter().enumerate() {
            let name = f
                .pointer("/properties/name")
                .and_then(Value::as_str)
                .ok_or_else(|| bad(format!("feature {i} has no string \"name\" property")))?;
            let geometry = f
                .get("geometry")
                .ok_or_else(|| bad(format!("feature {i} has no geometry")))?;
            let coords = geometry
                .get("coordinates")
                .ok_or_else(|| bad(format!("feature {i} geometry has no coordinates")))?;
            let polygons = match geometry.get("type").and_then(Value::as_str) {
                Some("Polygon") => vec![parse_polygon(coords).map_err(|r| bad(format!("feature {i}: {r}")))?],
                Some("MultiPolygon") => coords
                    .as_array()
                    .ok_or_else(|| bad(format!("feature {i}: MultiPolygon coordinates not an array")))?
                    .iter()
                    .map(parse_polygon)
                    .collect::<Result<_, _>>()
                    .map_err(|r| bad(format!("feature {i}: {r}")))?,
                other => return Err(bad(format!("feature {i}: unsupported geometry type {other:?}"))),
            };
            regions.push(Region {
                name: name.to_string(),
                polygons,
            });
        }
        Self::new(regions)
    }
}

fn parse_polygon(coords: &Value) -> Result<Polygon, String> {
    let rings = coords.as_array().ok_or("polygon coordinates not an array")?;
    let mut parsed = rings.iter().map(parse_ring);
    let exterior = parsed.next().ok_or("polygon has no rings")??;
    let holes = parsed.collect::<Result<Vec<_>, _>>()?;
    Ok(Polygon { exterior, holes })
}

// GeoJSON positions are [lon, lat].
fn parse_ring(ring: &Value) -> Result<Vec<(f64, f64)>, String> {
    let positions = ring.as_array().ok_or("ring is not an array")?;
    let mut out = Vec::with_capacity(positions.len());
    for pos in positions {
        let pair = pos.as_array().filter(|a| a.len() >= 2).ok_or("position needs [lon, lat]")?;
        let lon = pair[0].as_f64().ok_or("non-numeric longitude")?;
        let lat = pair[1].as_f64().ok_or("non-numeric latitude")?;
        out.push((lat, lon));
    }
    Ok(open_ring(out))
}

/// Name of the first region (in declared order) containing the point.
pub fn assign_region<'a>(p: &GridPoint, regions: &'a RegionSet) -> Option<&'a str> {
    regions
        .regions
        .iter()
        .find(|r| r.contains(p.lat, p.lon))
        .map(|r| r.name.as_str())
}
