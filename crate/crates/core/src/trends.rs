//! Thresholded food counts, per-region popularity and report export.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fusion::Prediction;
use crate::geogrid::{assign_region, GridPoint, RegionSet};

/// Source name given to the fusion classifier's own predictions.
pub const CLASSIFIER_SOURCE: &str = "classifier";
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.70;

#[derive(Debug, Error)]
pub enum TrendError {
    #[error("invalid trend config: {0}")]
    Config(String),
    #[error("detection file row {row}: {reason}")]
    Detections { row: usize, reason: String },
    #[error("prediction for {example_id} has class index {index} but only {n_classes} classes")]
    UnknownClass {
        example_id: String,
        index: usize,
        n_classes: usize,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub example_id: String,
    pub label: String,
    pub confidence: f64,
    pub source: String,
}

/// Externally computed detections, CSV `example_id,label,confidence,source`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub rows: Vec<Detection>,
}

impl DetectionFile {
    pub fn from_csv(text: &str) -> Result<Self, TrendError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<Detection>().enumerate() {
            let row = i + 2;
            let d = rec.map_err(|e| TrendError::Detections {
                row,
                reason: e.to_string(),
            })?;
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(TrendError::Detections {
                    row,
                    reason: format!("confidence {} outside [0, 1]", d.confidence),
                });
            }
            rows.push(d);
        }
        Ok(Self { rows })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TrendError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrendConfig {
    pub confidence_threshold: f64,
    /// Sources to count; `None` counts every source.
    pub sources_enabled: Option<BTreeSet<String>>,
}

impl Default for TrendConfig {
    fn default() -> Self {
        Self {
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            sources_enabled: None,
        }
    }
}

impl TrendConfig {
    pub fn validate(&self) -> Result<(), TrendError> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(TrendError::Config(format!(
                "confidence_threshold {} outside [0, 1]",
                self.confidence_threshold
            )));
        }
        Ok(())
    }

    fn enabled(&self, source: &str) -> bool {
        self.sources_enabled.as_ref().is_none_or(|s| s.contains(source))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionTop {
    pub label: String,
    pub count: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub confidence_threshold: f64,
    pub per_food_counts: BTreeMap<String, u64>,
    pub per_source_counts: BTreeMap<String, BTreeMap<String, u64>>,
    pub per_region_counts: BTreeMap<String, BTreeMap<String, u64>>,
    pub per_region_top: BTreeMap<String, RegionTop>,
    pub n_images_with_food: u64,
    pub multi_label_images: u64,
    /// Counted images with no geotag or outside every region.
    pub unplaced_images: u64,
    pub skipped_unknown_detections: u64,
}

/// Counts each (image, label) pair at most once when its confidence reaches
/// the threshold and its source is enabled.
pub fn analyze_trends(
    predictions: &[Prediction],
    classes: &[String],
    detections: &DetectionFile,
    geo: &HashMap<String, (f64, f64)>,
    regions: &RegionSet,
    cfg: &TrendConfig,
) -> Result<TrendReport, TrendError> {
    cfg.validate()?;
    let mut rows: Vec<(&str, &str, f64, &str)> = Vec::with_capacity(predictions.len() + detections.rows.len());
    for p in predictions {
        let label = classes.get(p.top_label).ok_or_else(|| TrendError::UnknownClass {
            example_id: p.example_id.clone(),
            index: p.top_label,
            n_classes: classes.len(),
        })?;
        rows.push((&p.example_id, label, p.confidence, CLASSIFIER_SOURCE));
    }
    let known: HashSet<&str> = predictions
        .iter()
        .map(|p| p.example_id.as_str())
        .chain(geo.keys().map(String::as_str))
        .collect();
    let mut skipped = 0u64;
    for d in &detections.rows {
        if known.contains(d.example_id.as_str()) {
            rows.push((&d.example_id, &d.label, d.confidence, &d.source));
        } else {
            skipped += 1;
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} detections for unknown example ids");
    }

    let mut pairs: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut per_source: BTreeSet<(&str, &str, &str)> = BTreeSet::new();
    for &(id, label, confidence, source) in &rows {
        if confidence >= cfg.confidence_threshold && cfg.enabled(source) {
            pairs.insert((id, label));
            per_source.insert((source, id, label));
        }
    }

    let mut report = TrendReport {
        confidence_threshold: cfg.confidence_threshold,
        skipped_unknown_detections: skipped,
        ..Default::default()
    };
    for &(source, _, label) in &per_source {
        *report
            .per_source_counts
            .entry(source.to_string())
            .or_default()
            .entry(label.to_string())
            .or_default() += 1;
    }
    let mut labels_per_image: BTreeMap<&str, usize> = BTreeMap::new();
    for &(id, label) in &pairs {
        *report.per_food_counts.entry(label.to_string()).or_default() += 1;
        *labels_per_image.entry(id).or_default() += 1;
    }
    report.n_images_with_food = labels_per_image.len() as u64;
    report.multi_label_images = labels_per_image.values().filter(|&&n| n > 1).count() as u64;

    let mut region_of: HashMap<&str, Option<&str>> = HashMap::new();
    for &id in labels_per_image.keys() {
        let region = geo
            .get(id)
            .and_then(|&(lat, lon)| assign_region(&GridPoint { lat, lon }, regions));
        if region.is_none() {
            report.unplaced_images += 1;
        }
        region_of.insert(id, region);
    }
    for &(id, label) in &pairs {
        if let Some(region) = region_of[id] {
            *report
                .per_region_counts
                .entry(region.to_string())
                .or_default()
                .entry(label.to_string())
                .or_default() += 1;
        }
    }
    for (region, counts) in &report.per_region_counts {
        // BTreeMap iteration is label-ordered, so the first max wins ties.
        let mut top: Option<(&String, u64)> = None;
        for (label, &count) in counts {
            if top.is_none_or(|(_, c)| count > c) {
                top = Some((label, count));
            }
        }
        if let Some((label, count)) = top {
            report.per_region_top.insert(
                region.clone(),
                RegionTop {
                    label: label.clone(),
                    count,
                },
            );
        }
    }
    Ok(report)
}

/// Deterministic fill color for a label.
pub fn label_color(label: &str) -> String {
    let h = Sha256::digest(label.as_bytes());
    format!("#{:02x}{:02x}{:02x}", 48 + h[0] % 176, 48 + h[1] % 176, 48 + h[2] % 176)
}

const NO_DATA_FILL: &str = "#dddddd";

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

/// Choropleth of each region's top food with raw lon/lat as planar x/y.
pub fn render_choropleth(report: &TrendReport, regions: &RegionSet) -> String {
    const WIDTH: f64 = 800.0;
    const MARGIN: f64 = 10.0;
    let (mut min_lat, mut max_lat, mut min_lon, mut max_lon) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (lat, lon) in regions
        .regions()
        .iter()
        .flat_map(|r| &r.polygons)
        .flat_map(|p| p.rings())
        .flatten()
    {
        min_lat = min_lat.min(*lat);
        max_lat = max_lat.max(*lat);
        min_lon = min_lon.min(*lon);
        max_lon = max_lon.max(*lon);
    }
    if min_lat > max_lat {
        (min_lat, max_lat, min_lon, max_lon) = (0.0, 1.0, 0.0, 1.0);
    }
    let span_lon = (max_lon - min_lon).max(1e-9);
    let span_lat = (max_lat - min_lat).max(1e-9);
    let scale = WIDTH / span_lon;
    let map_h = span_lat * scale;
    let legend: BTreeSet<&str> = report.per_region_top.values().map(|t| t.label.as_str()).collect();
    let height = map_h + 2.0 * MARGIN + 20.0 * legend.len() as f64 + 10.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{height:.0}" viewBox="0 0 {w:.0} {height:.0}">"#,
        w = WIDTH + 2.0 * MARGIN
    );
    for region in regions.regions() {
        let top = report.per_region_top.get(&region.name);
        let fill = top.map_or_else(|| NO_DATA_FILL.to_string(), |t| label_color(&t.label));
        let title = match top {
            Some(t) => format!("{}: {} ({})", region.name, t.label, t.count),
            None => format!("{}: no data", region.name),
        };
        let mut d = String::new();
        for ring in region.polygons.iter().flat_map(|p| p.rings()) {
            for (i, (lat, lon)) in ring.iter().enumerate() {
                let x = MARGIN + (lon - min_lon) * scale;
                let y = MARGIN + (max_lat - lat) * scale;
                let _ = write!(d, "{}{x:.2} {y:.2} ", if i == 0 { "M" } else { "L" });
            }
            d.push_str("Z ");
        }
        let _ = writeln!(
            svg,
            r##"<g class="region" data-name="{name}"><path d="{d}" fill="{fill}" fill-rule="evenodd" stroke="#333333" stroke-width="0.5"/><title>{title}</title></g>"##,
            name = xml_escape(&region.name),
            d = d.trim_end(),
            title = xml_escape(&title),
        );
    }
    let _ = writeln!(svg, r#"<g class="legend">"#);
    for (i, label) in legend.iter().enumerate() {
        let y = map_h + 2.0 * MARGIN + 20.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{MARGIN}" y="{y:.0}" width="14" height="14" fill="{}"/><text x="{tx}" y="{ty:.0}" font-size="12">{}</text>"#,
            label_color(label),
            xml_escape(label),
            tx = MARGIN + 20.0,
            ty = y + 12.0,
        );
    }
    svg.push_str("</g>\n</svg>\n");
    svg
}

fn per_region_csv(report: &TrendReport, regions: &RegionSet) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["region", "top_label", "top_count", "total"]).expect("write to memory");
    for region in regions.regions() {
        let total: u64 = report
            .per_region_counts
            .get(&region.name)
            .map_or(0, |c| c.values().sum());
        let (label, count) = report
            .per_region_top
            .get(&region.name)
            .map_or((String::new(), 0), |t| (t.label.clone(), t.count));
        w.write_record([region.name.clone(), label, count.to_string(), total.to_string()])
            .expect("write to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 csv")
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), TrendError> {
    fs::write(path, bytes).map_err(|source| TrendError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `report.json`, `per_region.csv` and `choropleth.svg` into `out_dir`.
pub fn export_report(report: &TrendReport, regions: &RegionSet, out_dir: impl AsRef<Path>) -> Result<(), TrendError> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| TrendError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(&dir.join("report.json"), json.as_bytes())?;
    write(&dir.join("per_region.csv"), per_region_csv(report, regions).as_bytes())?;
    write(&dir.join("choropleth.svg"), render_choropleth(report, regions).as_bytes())
}

/// Writes `word,count` rows, most frequent first.
pub fn export_word_frequencies(counts: &[(String, u64)], path: impl AsRef<Path>) -> Result<(), TrendError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["word", "count"]).expect("write to memory");
    for (word, count) in counts {
        w.write_record([word.as_str(), &count.to_string()]).expect("write to memory");
    }
    write(path.as_ref(), &w.into_inner().expect("flush to memory"))
}
