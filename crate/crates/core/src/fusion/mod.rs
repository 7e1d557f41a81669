//! Late-fusion classification head trained on precomputed feature vectors.

mod features;
mod head;
pub mod stub;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DatasetManifest, Fold, LabeledExample, N_FOLDS};
use crate::seed::stage_rng;

pub use features::{read_feature_file, FeatureError, FeatureTable, Modality, FEATURE_MAGIC, FEATURE_VERSION};
pub use head::{argmax, loss_and_gradients, FusionHeadParams, Sample, HEAD_MAGIC, HEAD_VERSION};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid head file: {0}")]
    HeadFormat(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("no training examples for fold {0:?}")]
    EmptyTrainSplit(Option<u8>),
    #[error("manifest has no split assignment; run the split step first")]
    NoSplits,
    #[error("no image features for example {0}")]
    MissingImageFeatures(String),
    #[error("expected a {expected:?} feature table, got {got:?}")]
    WrongModality { expected: Modality, got: Modality },
}

/// Which feature blocks the head sees. Masked blocks are fed as zeros.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMask {
    #[default]
    Fused,
    ImageOnly,
    TextOnly,
}

impl ModalityMask {
    fn keeps_image(self) -> bool {
        self != ModalityMask::TextOnly
    }

    fn keeps_text(self) -> bool {
        self != ModalityMask::ImageOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
    pub mask: ModalityMask,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            momentum: 0.9,
            epochs: 12,
            batch_size: 32,
            hidden: 10_000,
            seed: 0,
            mask: ModalityMask::Fused,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.hidden == 0 {
            return bad("hidden must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the pre-update predictions seen during the epoch.
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub n_train: usize,
    pub n_validation: usize,
    /// Examples that had no text row and were fed a zero text vector.
    pub missing_text: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    pub probabilities: Vec<f64>,
    pub top_label: usize,
    pub confidence: f64,
}

impl Prediction {
    fn new(example_id: &str, probabilities: Vec<f64>) -> Self {
        let top_label = argmax(&probabilities);
        Self {
            example_id: example_id.to_string(),
            confidence: probabilities[top_label],
            probabilities,
            top_label,
        }
    }
}

/// Class probabilities for one example. A missing text row is read as zeros.
pub fn predict(
    head: &FusionHeadParams,
    example_id: &str,
    image: &[f32],
    text: Option<&[f32]>,
) -> Result<Prediction, FusionError> {
    let zeros;
    let text = match text {
        Some(t) => t,
        None => {
            zeros = vec![0.0f32; head.d_txt];
            &zeros
        }
    };
    Ok(Prediction::new(example_id, head.forward_f32(image, text)?))
}

/// Feature lookup shared by training and batch prediction.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSource<'a> {
    pub images: &'a FeatureTable,
    pub texts: Option<&'a FeatureTable>,
    pub mask: ModalityMask,
}

impl<'a> FeatureSource<'a> {
    pub fn new(images: &'a FeatureTable, texts: Option<&'a FeatureTable>) -> Result<Self, FusionError> {
        if images.modality() != Modality::Image {
            return Err(FusionError::WrongModality {
                expected: Modality::Image,
                got: images.modality(),
            });
        }
        if let Some(t) = texts {
            if t.modality() != Modality::Text {
                return Err(FusionError::WrongModality {
                    expected: Modality::Text,
                    got: t.modality(),
                });
            }
        }
        Ok(Self {
            images,
            texts,
            mask: ModalityMask::Fused,
        })
    }

    pub fn with_mask(mut self, mask: ModalityMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn d_img(&self) -> usize {
        self.images.dim()
    }

    pub fn d_txt(&self) -> usize {
        self.texts.map_or(0, FeatureTable::dim)
    }

    /// Appends the masked, concatenated input of `id` to `out`.
    /// Returns false when the text row was missing.
    fn extend_row(&self, id: &str, out: &mut Vec<f64>) -> Result<bool, FusionError> {
        let img = self
            .images
            .get(id)
            .ok_or_else(|| FusionError::MissingImageFeatures(id.to_string()))?;
        if self.mask.keeps_image() {
            out.extend(img.iter().map(|&v| v as f64));
        } else {
            out.extend(std::iter::repeat_n(0.0, img.len()));
        }
        let txt = self.texts.and_then(|t| t.get(id));
        match txt {
            Some(t) if self.mask.keeps_text() => out.extend(t.iter().map(|&v| v as f64)),
            _ => out.extend(std::iter::repeat_n(0.0, self.d_txt())),
        }
        Ok(txt.is_some() || self.texts.is_none())
    }

    fn matrix<'e>(
        &self,
        examples: impl Iterator<Item = &'e LabeledExample>,
        missing_text: &mut HashSet<String>,
    ) -> Result<(Vec<f64>, Vec<usize>), FusionError> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for e in examples {
            if !self.extend_row(&e.example_id, &mut x)? {
                missing_text.insert(e.example_id.clone());
            }
            y.push(e.label);
        }
        Ok((x, y))
    }

    /// Predictions for `examples` under this source's mask.
    pub fn predict_all<'e>(
        &self,
        head: &FusionHeadParams,
        examples: impl Iterator<Item = &'e LabeledExample>,
    ) -> Result<Vec<Prediction>, FusionError> {
        check_head(head, self)?;
        let mut row = Vec::with_capacity(head.d_in());
        examples
            .map(|e| {
                row.clear();
                self.extend_row(&e.example_id, &mut row)?;
                let (img, txt) = row.split_at(head.d_img);
                Ok(Prediction::new(&e.example_id, head.forward(img, txt)?))
            })
            .collect()
    }
}

fn check_head(head: &FusionHeadParams, src: &FeatureSource<'_>) -> Result<(), FusionError> {
    if head.d_img != src.d_img() || head.d_txt != src.d_txt() {
        return Err(FusionError::Shape(format!(
            "head expects ({}, {}) input dims, features have ({}, {})",
            head.d_img,
            head.d_txt,
            src.d_img(),
            src.d_txt()
        )));
    }
    Ok(())
}

/// Trains on folds other than `fold`, validating on `fold` after every epoch
/// and keeping the best-validating parameters. With `fold = None` every
/// non-holdout example is used for training and the final epoch is kept.
pub fn train(
    manifest: &DatasetManifest,
    source: &FeatureSource<'_>,
    fold: Option<u8>,
    cfg: &TrainConfig,
) -> Result<(FusionHeadParams, TrainHistory), FusionError> {
    cfg.validate()?;
    if !manifest.has_splits() {
        return Err(FusionError::NoSplits);
    }
    let n_classes = manifest.n_classes();
    if n_classes < 2 {
        return Err(FusionError::Config("need at least two classes".into()));
    }
    if let Some(k) = fold {
        if k >= N_FOLDS {
            return Err(FusionError::Config(format!("fold {k} out of range 0..{N_FOLDS}")));
        }
    }
    let source = source.with_mask(cfg.mask);
    let (d_img, d_txt) = (source.d_img(), source.d_txt());
    let d_in = d_img + d_txt;
    let mut missing = HashSet::new();
    let (train_x, train_y) = match fold {
        Some(k) => source.matrix(manifest.train_examples(k), &mut missing)?,
        None => source.matrix(
            manifest.examples.iter().filter(|e| matches!(e.fold, Fold::Fold(_))),
            &mut missing,
        )?,
    };
    if train_y.is_empty() {
        return Err(FusionError::EmptyTrainSplit(fold));
    }
    let (val_x, val_y) = match fold {
        Some(k) => source.matrix(manifest.validation_examples(k), &mut missing)?,
        None => (Vec::new(), Vec::new()),
    };

    let mut params = FusionHeadParams::init(d_img, d_txt, cfg.hidden, n_classes, cfg.seed);
    let mut velocity = FusionHeadParams::zeros(d_img, d_txt, cfg.hidden, n_classes);
    let mut grads = velocity.clone();
    let mut ws = head::Workspace::new(&params);
    let mut rng = stage_rng(cfg.seed, "fusion/shuffle");
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut history = TrainHistory {
        n_train: train_y.len(),
        n_validation: val_y.len(),
        missing_text: missing.len(),
        ..Default::default()
    };
    let mut best: Option<(f64, FusionHeadParams)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| Sample {
                    x: &train_x[i * d_in..(i + 1) * d_in],
                    label: train_y[i],
                })
                .collect();
            grads.fill_zero();
            let (loss, c) = head::accumulate(&params, &batch, &mut grads, &mut ws);
            loss_sum += loss;
            correct += c;
            params.momentum_step(&mut velocity, &mut grads, cfg.learning_rate, cfg.momentum);
        }
        let n = train_y.len() as f64;
        let validation_accuracy = (!val_y.is_empty()).then(|| accuracy(&params, &val_x, &val_y));
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            validation_accuracy,
        });
        log::debug!("epoch {epoch}: loss {:.5} val {:?}", loss_sum / n, validation_accuracy);
        match validation_accuracy {
            Some(acc) if best.as_ref().is_none_or(|(b, _)| acc > *b) => {
                best = Some((acc, params.clone()));
                history.best_epoch = epoch;
            }
            None => history.best_epoch = epoch,
            _ => {}
        }
    }
    let params = match best {
        Some((_, p)) if !val_y.is_empty() => p,
        _ => params,
    };
    Ok((params, history))
}

fn accuracy(params: &FusionHeadParams, x: &[f64], y: &[usize]) -> f64 {
    let d_in = params.d_in();
    let mut correct = 0;
    for (xs, ys) in x.chunks(256 * d_in).zip(y.chunks(256)) {
        let view = ndarray::ArrayView2::from_shape((ys.len(), d_in), xs).expect("row-major batch");
        let (_, z) = params.forward_batch(view);
        correct += z
            .rows()
            .into_iter()
            .zip(ys)
            .filter(|(r, &label)| argmax(r.as_slice().expect("contiguous")) == label)
            .count();
    }
    correct as f64 / y.len() as f64
}
