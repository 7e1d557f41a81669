//! The `foodtrend` command line.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use config::{BuildConfig, EvalSection, PathsConfig, PipelineConfig, SimSection};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

macro_rules! classify {
    ($ty:ty, $($io:pat),+) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                match e {
                    $($io)|+ => CliError::Io(e.to_string()),
                    _ => CliError::Validation(e.to_string()),
                }
            }
        }
    };
}

use crate::corpus::CorpusError;
use crate::evalkit::EvalError;
use crate::fusion::{FeatureError, FusionError};
use crate::geogrid::GeoError;
use crate::scrape::ScrapeError;
use crate::text::TextError;
use crate::trends::TrendError;

classify!(CorpusError, CorpusError::Io { .. });
classify!(GeoError, GeoError::Io { .. });
classify!(TextError, TextError::Io { .. });
classify!(TrendError, TrendError::Io { .. });
classify!(FeatureError, FeatureError::Io { .. });
classify!(
    FusionError,
    FusionError::Io { .. },
    FusionError::Feature(FeatureError::Io { .. })
);
classify!(
    EvalError,
    EvalError::Io { .. },
    EvalError::Fusion(FusionError::Io { .. }),
    EvalError::Fusion(FusionError::Feature(FeatureError::Io { .. }))
);
classify!(
    ScrapeError,
    ScrapeError::Aborted { .. },
    ScrapeError::Store(CorpusError::Io { .. })
);

#[derive(Debug, Parser)]
#[command(
    name = "foodtrend",
    version,
    about = "Harvest geotagged food posts, build datasets, train a late-fusion classifier and report food trends",
    arg_required_else_help = true
)]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Root seed; overrides the config's seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the grid points of the configured bounding boxes as "lat,lon" lines.
    Grid {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Harvest posts into the corpus store.
    Scrape {
        #[arg(value_enum)]
        mode: ScrapeMode,
        #[arg(long, value_enum, default_value_t = ProviderKind::Sim)]
        provider: ProviderKind,
    },
    /// Build a dataset manifest.
    Build {
        #[command(subcommand)]
        kind: BuildKind,
    },
    /// Assign holdout and fold splits to a manifest.
    Split(ManifestIo),
    /// Write deterministic stand-in feature files for every stored image.
    StubFeatures {
        /// Manifests whose labels shape the image features.
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
    },
    /// Train a fusion head.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Validation fold; omit to train on all five folds.
        #[arg(long)]
        fold: Option<u8>,
        #[arg(long, value_enum, default_value_t = MaskArg::Fused)]
        mask: MaskArg,
        /// Output head file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validate and report holdout metrics.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare image-only, caption-only and fused heads.
    Ablate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify stored images and export trend reports.
    Trends {
        #[arg(long)]
        head: Option<PathBuf>,
        /// Manifest supplying the head's class names.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Remove hashtagged food names from manifest captions.
    StripCaptions(ManifestIo),
    /// Count caption words, most frequent first.
    Wordfreq {
        /// Read captions from a manifest instead of the store.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ManifestIo {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output path; defaults to rewriting the input.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum BuildKind {
    /// Food-type manifest from keyword-labeled posts.
    FoodTypes {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Balanced food/non-food manifest scored by a 2-class detector head.
    Binary {
        /// Detector head; output 0 must be the food class.
        #[arg(long)]
        head: PathBuf,
        /// Positive manifest whose images are excluded from candidates.
        #[arg(long)]
        positives: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScrapeMode {
    Location,
    Keywords,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProviderKind {
    /// Seeded simulated world.
    Sim,
    /// HTTP provider configured by environment variables.
    Env,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskArg {
    Fused,
    Image,
    Caption,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
