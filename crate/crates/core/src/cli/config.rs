use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::fusion::stub::StubExtractor;
use crate::fusion::TrainConfig;
use crate::geogrid::GridSpec;
use crate::scrape::ScrapeLimits;
use crate::trends::TrendConfig;

/// Everything a pipeline run needs. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub grid: Option<GridSpec>,
    pub scrape: ScrapeLimits,
    pub sim: SimSection,
    pub build: BuildConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub trends: TrendConfig,
    pub stub: StubExtractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Corpus store directory (created on first scrape).
    pub store: PathBuf,
    /// Directory for manifests, features, models and reports.
    pub work_dir: PathBuf,
    pub keywords: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    pub decisions: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub image_features: Option<PathBuf>,
    pub text_features: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            store: "corpus".into(),
            work_dir: "work".into(),
            keywords: None,
            stopwords: None,
            regions: None,
            decisions: None,
            detections: None,
            image_features: None,
            text_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub n_locations: usize,
    pub posts_per_location: [usize; 2],
    pub keyword_caption_probability: f64,
    /// Food names for simulated hashtags; empty uses the keyword list.
    pub keywords: Vec<String>,
    pub page_size: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            n_locations: 100,
            posts_per_location: [1, 3],
            keyword_caption_probability: 0.3,
            keywords: Vec::new(),
            page_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub min_class_size: usize,
    pub food_threshold: f64,
    pub target_per_class: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            min_class_size: 200,
            food_threshold: 0.5,
            target_per_class: 52_000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// (truth, predicted) class pairs whose confusion rates `ablate` reports.
    pub confusion_pairs: Vec<[String; 2]>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    /// Reads, resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        join(&mut paths.store);
        join(&mut paths.work_dir);
        for p in [
            &mut paths.keywords,
            &mut paths.stopwords,
            &mut paths.regions,
            &mut paths.decisions,
            &mut paths.detections,
            &mut paths.image_features,
            &mut paths.text_features,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }

    /// Checks value ranges and that every referenced input file exists.
    pub fn validate(&self) -> Result<(), CliError> {
        let p = &self.paths;
        for (name, path) in [
            ("keywords", &p.keywords),
            ("stopwords", &p.stopwords),
            ("regions", &p.regions),
            ("decisions", &p.decisions),
            ("detections", &p.detections),
        ] {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(CliError::Validation(format!(
                        "paths.{name}: {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        if let Some(grid) = &self.grid {
            grid.validate()?;
        }
        self.scrape.validate()?;
        self.train.validate()?;
        self.trends.validate()?;
        if !(0.0..=1.0).contains(&self.build.food_threshold) {
            return Err(CliError::Validation("build.food_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn work_path(&self, name: &str) -> PathBuf {
        self.paths.work_dir.join(name)
    }

    pub fn image_features(&self) -> PathBuf {
        self.paths
            .image_features
            .clone()
            .unwrap_or_else(|| self.work_path("image.feat"))
    }

    pub fn text_features(&self) -> PathBuf {
        self.paths
            .text_features
            .clone()
            .unwrap_or_else(|| self.work_path("text.feat"))
    }
}
