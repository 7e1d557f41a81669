#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use foodtrend::corpus::{DatasetManifest, Fold, LabeledExample};
use foodtrend::geogrid::{GeoBoundingBox, GridPoint, GridSpec};
use foodtrend::scrape::{
    simulate_world, ContentHash, LocationRecord, MediaRef, Page, PostProvider, PostRecord, PostSource, ProviderError,
    SimWorldConfig, SimulatedProvider,
};

/// Food-type class counts of the reference dataset (8,174 images).
pub const REFERENCE_CLASS_COUNTS: [(&str, usize); 13] = [
    ("bhaji", 789),
    ("chapati", 1076),
    ("nyama choma", 980),
    ("mandazi", 775),
    ("masala chips", 546),
    ("kachumbari", 619),
    ("ugali", 785),
    ("pilau", 410),
    ("matoke", 604),
    ("githeri", 600),
    ("mukimo", 266),
    ("sukuma wiki", 505),
    ("kuku choma", 219),
];

pub fn sim_box() -> GeoBoundingBox {
    GeoBoundingBox::new(-1.30, -1.20, 36.80, 36.90)
}

/// Nested-loop reference: step each axis until the next point would pass
/// the box's far edge.
pub fn grid_oracle(boxes: &[GeoBoundingBox], stride_lat: f64, stride_lon: f64) -> Vec<(f64, f64)> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for b in boxes {
        let mut i = 0;
        while i as f64 * stride_lat <= (b.max_lat - b.min_lat) + 1e-9 * stride_lat {
            let lat = b.min_lat + i as f64 * stride_lat;
            let mut j = 0;
            while j as f64 * stride_lon <= (b.max_lon - b.min_lon) + 1e-9 * stride_lon {
                let lon = b.min_lon + j as f64 * stride_lon;
                if seen.insert(((lat * 1e6).round() as i64, (lon * 1e6).round() as i64)) {
                    out.push((lat, lon));
                }
                j += 1;
            }
            i += 1;
        }
    }
    out
}

/// A world of `n_locations` venues with exactly `posts_each` posts.
pub fn sim_world(seed: u64, n_locations: usize, posts_each: usize) -> SimulatedProvider {
    let cfg = SimWorldConfig::new(seed, n_locations, [posts_each, posts_each], vec![sim_box()]);
    simulate_world(&cfg).expect("valid sim config")
}

/// Grid over the sim box whose search squares cover every venue.
pub fn sim_grid() -> GridSpec {
    GridSpec::new(vec![sim_box()])
}

pub fn post(key: &str, caption: &str, n_images: usize) -> PostRecord {
    PostRecord {
        primary_key: key.into(),
        post_id: key.into(),
        image_refs: (0..n_images)
            .map(|i| MediaRef {
                url: format!("u/{key}/{i}"),
                local_path: Some(format!("media/{key}{i}")),
                content_hash: Some(ContentHash::of(format!("{key}{i}").as_bytes())),
            })
            .collect(),
        caption: Some(caption.into()),
        geo: None,
        timestamp: 0,
        source: PostSource::ByKeyword,
        tags: vec![],
    }
}

/// An unsplit manifest with `counts[c]` examples of class `c`.
pub fn manifest_with_counts(names: &[&str], counts: &[usize]) -> DatasetManifest {
    let mut examples = Vec::new();
    for (label, (&name, &n)) in names.iter().zip(counts).enumerate() {
        for i in 0..n {
            let example_id = format!("{}_{i}#0", name.replace(' ', "_"));
            examples.push(LabeledExample {
                content_hash: ContentHash::of(example_id.as_bytes()),
                example_id,
                caption: String::new(),
                label,
                fold: Fold::Unassigned,
            });
        }
    }
    DatasetManifest {
        dataset_name: "synthetic".into(),
        classes: names.iter().map(|s| s.to_string()).collect(),
        examples,
        split_seed: None,
    }
}

/// Every file under `root` keyed by its relative path.
pub fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Fails fatally once `budget` calls have been made.
pub struct Crashing<P> {
    pub inner: P,
    pub budget: usize,
    pub calls: AtomicUsize,
}

impl<P> Crashing<P> {
    pub fn new(inner: P, budget: usize) -> Self {
        Self {
            inner,
            budget,
            calls: AtomicUsize::new(0),
        }
    }

    fn tick(&self) -> Result<(), ProviderError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.budget {
            Err(ProviderError::Fatal("injected crash".into()))
        } else {
            Ok(())
        }
    }
}

impl<P: PostProvider> PostProvider for Crashing<P> {
    fn search_locations_near(&self, p: GridPoint, r: f64, c: Option<&str>) -> Result<Page<LocationRecord>, ProviderError> {
        self.tick()?;
        self.inner.search_locations_near(p, r, c)
    }

    fn fetch_posts_by_location(&self, id: &str, c: Option<&str>) -> Result<Page<PostRecord>, ProviderError> {
        self.tick()?;
        self.inner.fetch_posts_by_location(id, c)
    }

    fn search_posts_by_keyword(&self, kw: &str, c: Option<&str>) -> Result<Page<PostRecord>, ProviderError> {
        self.tick()?;
        self.inner.search_posts_by_keyword(kw, c)
    }

    fn fetch_media(&self, url: &str) -> Result<Vec<u8>, ProviderError> {
        self.tick()?;
        self.inner.fetch_media(url)
    }
}

/// Records the start time of every call; stops the run after `deadline`.
pub struct Recording<P> {
    pub inner: P,
    pub started: Instant,
    pub deadline: Option<Duration>,
    pub calls: Mutex<Vec<Instant>>,
}

impl<P> Recording<P> {
    pub fn new(inner: P, deadline: Option<Duration>) -> Self {
        Self {
            inner,
            started: Instant::now(),
            deadline,
            calls: Mutex::new(Vec::new()),
        }
    }

    fn tick(&self) -> Result<(), ProviderError> {
        let now = Instant::now();
        if self.deadline.is_some_and(|d| now - self.started >= d) {
            return Err(ProviderError::Fatal("deadline".into()));
        }
        self.calls.lock().unwrap().push(now);
        Ok(())
    }

    /// Largest number of calls inside any half-open one-second window.
    pub fn max_per_second(&self) -> usize {
        let mut t = self.calls.lock().unwrap().clone();
        t.sort();
        let mut best = 0;
        let mut lo = 0;
        for hi in 0..t.len() {
            while t[hi] - t[lo] >= Duration::from_secs(1) {
                lo += 1;
            }
            best = best.max(hi - lo + 1);
        }
        best
    }
}

impl<P: PostProvider> PostProvider for Recording<P> {
    fn search_locations_near(&self, p: GridPoint, r: f64, c: Option<&str>) -> Result<Page<LocationRecord>, ProviderError> {
        self.tick()?;
        self.inner.search_locations_near(p, r, c)
    }

    fn fetch_posts_by_location(&self, id: &str, c: Option<&str>) -> Result<Page<PostRecord>, ProviderError> {
        self.tick()?;
        self.inner.fetch_posts_by_location(id, c)
    }

    fn search_posts_by_keyword(&self, kw: &str, c: Option<&str>) -> Result<Page<PostRecord>, ProviderError> {
        self.tick()?;
        self.inner.search_posts_by_keyword(kw, c)
    }

    fn fetch_media(&self, url: &str) -> Result<Vec<u8>, ProviderError> {
        self.tick()?;
        self.inner.fetch_media(url)
    }
}

pub fn foodtrend(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foodtrend"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

/// Small end-to-end pipeline config using the simulated provider.
pub const DRY_RUN_CONFIG: &str = r#"
seed = 11

[grid]
boxes = [{ min_lat = -1.30, max_lat = -1.20, min_lon = 36.80, max_lon = 36.90 }]

[scrape]
max_requests_per_second = 2000.0
max_concurrent_fetchers = 4
backoff_base = 0.01

[sim]
n_locations = 150
posts_per_location = [2, 4]
keyword_caption_probability = 0.9
keywords = ["ugali", "pilau", "chapati", "nyama choma"]

[build]
min_class_size = 20

[train]
hidden = 64
epochs = 8
learning_rate = 0.01

[eval]
confusion_pairs = [["ugali", "pilau"]]

[stub]
image_dim = 32
text_dim = 16
"#;

/// The full pipeline as CLI invocations, in order.
pub const DRY_RUN_STEPS: &[&[&str]] = &[
    &["grid", "--out", "work/grid.txt"],
    &["scrape", "location"],
    &["scrape", "keywords"],
    &["build", "food-types"],
    &["split"],
    &["stub-features", "--manifest", "work/food_types.jsonl"],
    &["train"],
    &["eval"],
    &["ablate"],
    &["trends"],
    &["wordfreq"],
];

/// Runs every dry-run step in `dir`, panicking with stderr on failure.
pub fn dry_run(dir: &Path) {
    std::fs::write(dir.join("pipeline.toml"), DRY_RUN_CONFIG).unwrap();
    for step in DRY_RUN_STEPS {
        let mut args = vec!["--config", "pipeline.toml"];
        args.extend_from_slice(step);
        let out = foodtrend(dir, &args);
        assert!(
            out.status.success(),
            "{step:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
    }
}
