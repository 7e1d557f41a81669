//! Python bindings for the `foodtrend` pipeline.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use foodtrend::corpus::{self, DatasetManifest, Fold};
use foodtrend::evalkit::{self, ConfusionMatrix};
use foodtrend::fusion::{self, argmax, FeatureSource, FeatureTable, FusionHeadParams, Modality, Prediction, TrainConfig};
use foodtrend::geogrid::{self, GeoBoundingBox, GridSpec};
use foodtrend::seed;
use foodtrend::text::{self, KeywordList};

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

/// Grid points `(lat, lon)` covering the given `(min_lat, max_lat, min_lon, max_lon)` boxes.
#[pyfunction]
#[pyo3(signature = (boxes, stride_lat = geogrid::DEFAULT_STRIDE_DEG, stride_lon = geogrid::DEFAULT_STRIDE_DEG))]
fn enumerate_grid(boxes: Vec<(f64, f64, f64, f64)>, stride_lat: f64, stride_lon: f64) -> PyResult<Vec<(f64, f64)>> {
    let boxes = boxes
        .into_iter()
        .map(|(a, b, c, d)| GeoBoundingBox::new(a, b, c, d))
        .collect();
    let spec = GridSpec::new(boxes).with_stride(stride_lat, stride_lon);
    let points = geogrid::enumerate_grid(&spec).map_err(value_err)?;
    Ok(points.into_iter().map(|p| (p.lat, p.lon)).collect())
}

/// Splits a caption into `(tokens, hashtags)`.
#[pyfunction]
fn normalize(caption: &str) -> (Vec<String>, Vec<String>) {
    let doc = text::normalize(caption);
    (doc.tokens, doc.hashtags)
}

fn keyword_list(names: Option<Vec<String>>) -> PyResult<KeywordList> {
    match names {
        Some(names) => KeywordList::from_names(names).map_err(value_err),
        None => Ok(KeywordList::kiswahili_default()),
    }
}

/// Keywords mentioned in `caption`, in keyword-list order. Uses the built-in
/// food list when `keywords` is omitted.
#[pyfunction]
#[pyo3(signature = (caption, keywords = None))]
fn match_keywords(caption: &str, keywords: Option<Vec<String>>) -> PyResult<Vec<String>> {
    let kw = keyword_list(keywords)?;
    Ok(text::match_keywords(&text::normalize(caption), &kw))
}

#[pyfunction]
#[pyo3(signature = (caption, keywords = None))]
fn strip_food_name_hashtags(caption: &str, keywords: Option<Vec<String>>) -> PyResult<String> {
    let kw = keyword_list(keywords)?;
    Ok(text::strip_food_name_hashtags(caption, &kw))
}

#[pyfunction]
fn derive_seed(root: u64, stage: &str) -> u64 {
    seed::derive_seed(root, stage)
}

fn parse_modality(name: &str) -> PyResult<Modality> {
    match name {
        "image" => Ok(Modality::Image),
        "text" => Ok(Modality::Text),
        other => Err(value_err(format!("unknown modality {other:?}; expected \"image\" or \"text\""))),
    }
}

/// Fixed-width feature vectors keyed by example id.
#[pyclass(name = "FeatureTable")]
#[derive(Clone)]
struct PyFeatureTable {
    inner: FeatureTable,
}

#[pymethods]
impl PyFeatureTable {
    #[new]
    fn new(modality: &str, dim: usize) -> PyResult<Self> {
        Ok(Self {
            inner: FeatureTable::new(parse_modality(modality)?, dim),
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let inner = fusion::read_feature_file(&path).map_err(|e| match e {
            fusion::FeatureError::Io { .. } => io_err(e),
            e => value_err(e),
        })?;
        Ok(Self { inner })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(path).map_err(io_err)
    }

    fn insert(&mut self, id: String, values: Vec<f32>) -> PyResult<()> {
        self.inner.insert(id, values).map_err(value_err)
    }

    fn get(&self, id: &str) -> Option<Vec<f32>> {
        self.inner.get(id).map(<[f32]>::to_vec)
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids().map(str::to_owned).collect()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn modality(&self) -> &'static str {
        match self.inner.modality() {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, id: &str) -> bool {
        self.inner.contains(id)
    }

    fn __repr__(&self) -> String {
        format!(
            "FeatureTable(modality={:?}, dim={}, rows={})",
            self.modality(),
            self.inner.dim(),
            self.inner.len()
        )
    }
}

/// A labeled dataset with optional split assignments.
#[pyclass(name = "Manifest")]
#[derive(Clone)]
struct PyManifest {
    inner: DatasetManifest,
}

#[pymethods]
impl PyManifest {
    /// Builds an unsplit manifest from `(example_id, label, caption)` rows.
    /// Content hashes are derived from the example ids.
    #[new]
    fn new(dataset_name: String, classes: Vec<String>, rows: Vec<(String, usize, String)>) -> PyResult<Self> {
        let examples = rows
            .into_iter()
            .map(|(example_id, label, caption)| corpus::LabeledExample {
                content_hash: foodtrend::scrape::ContentHash::of(example_id.as_bytes()),
                example_id,
                caption,
                label,
                fold: Fold::Unassigned,
            })
            .collect();
        let inner = DatasetManifest {
            dataset_name,
            classes,
            examples,
            split_seed: None,
        };
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = DatasetManifest::load(&path).map_err(|e| match e {
            corpus::CorpusError::Io { .. } => io_err(e),
            e => value_err(e),
        })?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(io_err)
    }

    /// Returns a copy with stratified holdout and fold assignments.
    fn assign_splits(&self, seed: u64) -> PyResult<Self> {
        let inner = corpus::assign_splits(&self.inner, seed).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.dataset_name
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    /// Example count per split name ("fold0".."fold4", "holdout", "unassigned").
    fn split_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.inner.examples {
            let key = match e.fold {
                Fold::Fold(k) => format!("fold{k}"),
                Fold::Holdout => "holdout".to_owned(),
                Fold::Unassigned => "unassigned".to_owned(),
            };
            *out.entry(key).or_insert(0) += 1;
        }
        out
    }

    /// `(example_id, label, caption)` for every example.
    fn examples(&self) -> Vec<(String, usize, String)> {
        self.inner
            .examples
            .iter()
            .map(|e| (e.example_id.clone(), e.label, e.caption.clone()))
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.examples.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Manifest(name={:?}, classes={}, examples={})",
            self.inner.dataset_name,
            self.inner.classes.len(),
            self.inner.examples.len()
        )
    }
}

/// The late-fusion classification head.
#[pyclass(name = "FusionHead")]
#[derive(Clone)]
struct PyFusionHead {
    inner: FusionHeadParams,
}

#[pymethods]
impl PyFusionHead {
    /// Randomly initialized head.
    #[staticmethod]
    #[pyo3(signature = (d_img, d_txt, hidden, n_classes, seed = 0))]
    fn init(d_img: usize, d_txt: usize, hidden: usize, n_classes: usize, seed: u64) -> PyResult<Self> {
        let inner = FusionHeadParams::init(d_img, d_txt, hidden, n_classes, seed);
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = FusionHeadParams::load(&path).map_err(|e| match e {
            fusion::FusionError::Io { .. } => io_err(e),
            e => value_err(e),
        })?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(io_err)
    }

    /// Class probabilities for one example.
    fn forward(&self, image: Vec<f64>, text: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&image, &text).map_err(value_err)
    }

    /// `(top_label, confidence, probabilities)`; a missing caption vector is read as zeros.
    #[pyo3(signature = (image, text = None))]
    fn predict(&self, image: Vec<f32>, text: Option<Vec<f32>>) -> PyResult<(usize, f64, Vec<f64>)> {
        let p = fusion::predict(&self.inner, "", &image, text.as_deref()).map_err(value_err)?;
        Ok((p.top_label, p.confidence, p.probabilities))
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let p = &self.inner;
        (p.d_img, p.d_txt, p.hidden, p.n_classes)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn __repr__(&self) -> String {
        let (a, b, c, d) = self.shape();
        format!("FusionHead(d_img={a}, d_txt={b}, hidden={c}, n_classes={d})")
    }
}

/// Trains a head on `manifest`; `fold=None` trains on every fold.
/// Returns the head and the per-epoch history as a JSON string.
#[pyfunction]
#[pyo3(signature = (manifest, images, texts = None, fold = None, config_json = None))]
fn train(
    py: Python<'_>,
    manifest: &PyManifest,
    images: &PyFeatureTable,
    texts: Option<&PyFeatureTable>,
    fold: Option<u8>,
    config_json: Option<&str>,
) -> PyResult<(PyFusionHead, String)> {
    let cfg: TrainConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(value_err)?,
        None => TrainConfig::default(),
    };
    let source = FeatureSource::new(&images.inner, texts.map(|t| &t.inner)).map_err(value_err)?;
    let (head, history) = py
        .allow_threads(|| fusion::train(&manifest.inner, &source, fold, &cfg))
        .map_err(value_err)?;
    let history = serde_json::to_string(&history).map_err(value_err)?;
    Ok((PyFusionHead { inner: head }, history))
}

fn predictions(probabilities: Vec<Vec<f64>>) -> Vec<Prediction> {
    probabilities
        .into_iter()
        .enumerate()
        .map(|(i, probabilities)| {
            let top_label = argmax(&probabilities);
            Prediction {
                example_id: i.to_string(),
                confidence: probabilities.get(top_label).copied().unwrap_or(0.0),
                top_label,
                probabilities,
            }
        })
        .collect()
}

/// Top-k accuracy in percent over rows of class probabilities.
#[pyfunction]
fn topk_accuracy(probabilities: Vec<Vec<f64>>, labels: Vec<usize>, k: usize) -> PyResult<f64> {
    evalkit::topk_accuracy(&predictions(probabilities), &labels, k).map_err(value_err)
}

/// Fraction of class-`truth` examples predicted as `predicted`, given a
/// square count matrix indexed `[truth][predicted]`.
#[pyfunction]
fn misclassification_rate(counts: Vec<Vec<u64>>, truth: usize, predicted: usize) -> PyResult<f64> {
    let classes = (0..counts.len()).map(|i| i.to_string()).collect();
    let mut cm = ConfusionMatrix::new(classes);
    if counts.iter().any(|row| row.len() != counts.len()) {
        return Err(value_err("confusion counts must be square"));
    }
    cm.counts = counts;
    evalkit::misclassification_rate(&cm, truth, predicted).map_err(value_err)
}

/// Mean and sample standard deviation.
#[pyfunction]
fn mean_std(values: Vec<f64>) -> (f64, f64) {
    evalkit::mean_std(&values)
}

/// Runs the `foodtrend` command line with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("foodtrend".to_owned()).chain(args).collect();
    py.allow_threads(|| foodtrend::cli::run(argv))
}

#[pymodule]
fn foodtrend_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyFeatureTable>()?;
    m.add_class::<PyManifest>()?;
    m.add_class::<PyFusionHead>()?;
    m.add_function(wrap_pyfunction!(enumerate_grid, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(match_keywords, m)?)?;
    m.add_function(wrap_pyfunction!(strip_food_name_hashtags, m)?)?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(topk_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(misclassification_rate, m)?)?;
    m.add_function(wrap_pyfunction!(mean_std, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
