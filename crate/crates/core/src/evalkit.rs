//! Accuracy metrics, confusion matrices and k-fold evaluation.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DatasetManifest, Fold, N_FOLDS};
use crate::fusion::{train, FeatureSource, FusionError, ModalityMask, Prediction, TrainConfig};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the number of classes ({n_classes})")]
    KTooLarge { k: usize, n_classes: usize },
    #[error("{predictions} predictions but {labels} labels")]
    Misaligned { predictions: usize, labels: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("misclassification rate undefined: class {0} has no test examples")]
    UndefinedRate(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("manifest is missing fold(s) {0:?} or the holdout split")]
    MissingFolds(Vec<String>),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn check_aligned(predictions: &[Prediction], labels: &[usize]) -> Result<(), EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Misaligned {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Position of `label` when classes are sorted by probability, highest
/// first, ties broken toward the lower class index.
fn rank_of(probabilities: &[f64], label: usize) -> usize {
    let p = probabilities[label];
    probabilities
        .iter()
        .enumerate()
        .filter(|&(i, &q)| q > p || (q == p && i < label))
        .count()
}

/// Percentage of examples whose true label is among the `k` most probable classes.
pub fn topk_accuracy(predictions: &[Prediction], labels: &[usize], k: usize) -> Result<f64, EvalError> {
    check_aligned(predictions, labels)?;
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let mut hits = 0;
    for (p, &label) in predictions.iter().zip(labels) {
        let n_classes = p.probabilities.len();
        if k > n_classes {
            return Err(EvalError::KTooLarge { k, n_classes });
        }
        if label >= n_classes {
            return Err(EvalError::LabelOutOfRange { label, n_classes });
        }
        if rank_of(&p.probabilities, label) < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// Counts with truth on rows and prediction on columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        Self {
            classes,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn support(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (row, other_row) in self.counts.iter_mut().zip(&other.counts) {
            row.iter_mut().zip(other_row).for_each(|(a, b)| *a += b);
        }
    }

    /// Recall per class; `None` where the class has no examples.
    pub fn recall(&self) -> Vec<Option<f64>> {
        (0..self.n_classes())
            .map(|i| {
                let s = self.support(i);
                (s > 0).then(|| self.counts[i][i] as f64 / s as f64)
            })
            .collect()
    }

    pub fn index(&self, name: &str) -> Result<usize, EvalError> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| EvalError::UnknownClass(name.to_string()))
    }

    /// CSV with class names as the header row and first column.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["truth\\predicted".to_string()];
        header.extend(self.classes.iter().cloned());
        w.write_record(&header).expect("write to memory");
        for (name, row) in self.classes.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).expect("write to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 csv")
    }
}

pub fn confusion_matrix(
    predictions: &[Prediction],
    labels: &[usize],
    classes: &[String],
) -> Result<ConfusionMatrix, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Misaligned {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let n_classes = classes.len();
    let mut cm = ConfusionMatrix::new(classes.to_vec());
    for (p, &label) in predictions.iter().zip(labels) {
        for l in [label, p.top_label] {
            if l >= n_classes {
                return Err(EvalError::LabelOutOfRange { label: l, n_classes });
            }
        }
        cm.counts[label][p.top_label] += 1;
    }
    Ok(cm)
}

/// Share of class `i` examples predicted as class `j`.
pub fn misclassification_rate(cm: &ConfusionMatrix, i: usize, j: usize) -> Result<f64, EvalError> {
    let n_classes = cm.n_classes();
    for l in [i, j] {
        if l >= n_classes {
            return Err(EvalError::LabelOutOfRange { label: l, n_classes });
        }
    }
    let support = cm.support(i);
    if support == 0 {
        return Err(EvalError::UndefinedRate(cm.classes[i].clone()));
    }
    Ok(cm.counts[i][j] as f64 / support as f64)
}

/// Mean and sample (n - 1) standard deviation; a single value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: u8,
    pub top1: f64,
    pub top3: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1_mean: f64,
    pub top1_std: f64,
    pub top3_mean: f64,
    pub top3_std: f64,
    /// `k` used for the top-3 column; smaller when there are fewer classes.
    pub top3_k: usize,
    pub std_estimator: String,
    pub holdout_size: usize,
    pub per_fold: Vec<FoldScore>,
    /// Summed over the fold models' holdout predictions.
    pub confusion: ConfusionMatrix,
    pub per_class_recall: Vec<Option<f64>>,
}

impl EvalReport {
    /// Aggregates per-fold scores and confusion matrices.
    pub fn from_folds(per_fold: Vec<FoldScore>, confusions: &[ConfusionMatrix], top3_k: usize, holdout_size: usize) -> Self {
        let (top1_mean, top1_std) = mean_std(&per_fold.iter().map(|f| f.top1).collect::<Vec<_>>());
        let (top3_mean, top3_std) = mean_std(&per_fold.iter().map(|f| f.top3).collect::<Vec<_>>());
        let mut confusion = confusions
            .first()
            .map(|c| ConfusionMatrix::new(c.classes.clone()))
            .unwrap_or_else(|| ConfusionMatrix::new(Vec::new()));
        confusions.iter().for_each(|c| confusion.add(c));
        Self {
            top1_mean,
            top1_std,
            top3_mean,
            top3_std,
            top3_k,
            std_estimator: "sample (n-1)".into(),
            holdout_size,
            per_fold,
            per_class_recall: confusion.recall(),
            confusion,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `eval_report.json` and `confusion.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        write_file(&dir.join("eval_report.json"), self.to_json().as_bytes())?;
        write_file(&dir.join("confusion.csv"), self.confusion.to_csv().as_bytes())
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    fs::write(path, bytes).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn check_folds(manifest: &DatasetManifest) -> Result<(), EvalError> {
    let mut missing: Vec<String> = (0..N_FOLDS)
        .filter(|&k| manifest.validation_examples(k).next().is_none())
        .map(|k| k.to_string())
        .collect();
    if manifest.holdout_examples().next().is_none() {
        missing.push("HOLDOUT".into());
    }
    if !manifest.has_splits() || !missing.is_empty() {
        return Err(EvalError::MissingFolds(missing));
    }
    Ok(())
}

/// Trains one model per fold and scores each on the shared holdout split.
pub fn cross_validate(
    manifest: &DatasetManifest,
    source: &FeatureSource<'_>,
    cfg: &TrainConfig,
) -> Result<EvalReport, EvalError> {
    check_folds(manifest)?;
    let k3 = 3.min(manifest.n_classes());
    let labels: Vec<usize> = manifest.holdout_examples().map(|e| e.label).collect();
    let results: Vec<(FoldScore, ConfusionMatrix)> = (0..N_FOLDS)
        .into_par_iter()
        .map(|k| {
            let (head, history) = train(manifest, source, Some(k), cfg)?;
            let preds = source.with_mask(cfg.mask).predict_all(&head, manifest.holdout_examples())?;
            let score = FoldScore {
                fold: k,
                top1: topk_accuracy(&preds, &labels, 1)?,
                top3: topk_accuracy(&preds, &labels, k3)?,
                best_epoch: history.best_epoch,
            };
            Ok((score, confusion_matrix(&preds, &labels, &manifest.classes)?))
        })
        .collect::<Result<_, EvalError>>()?;
    let (scores, confusions): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(EvalReport::from_folds(scores, &confusions, k3, labels.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRate {
    pub truth: String,
    pub predicted: String,
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// "image", "caption" or "fused".
    pub modality: String,
    pub top1_mean: f64,
    pub top1_std: f64,
    pub top3_mean: f64,
    pub top3_std: f64,
    pub pair_rates: Vec<PairRate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["modality", "top1_mean", "top1_std", "top3_mean", "top3_std"])
            .expect("write to memory");
        for r in &self.rows {
            w.write_record([
                r.modality.clone(),
                format!("{:.4}", r.top1_mean),
                format!("{:.4}", r.top1_std),
                format!("{:.4}", r.top3_mean),
                format!("{:.4}", r.top3_std),
            ])
            .expect("write to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 csv")
    }
}

/// Cross-validates image-only, caption-only and fused heads on the same
/// splits. `pairs` names (truth, predicted) confusions to report per row.
pub fn ablate(
    manifest: &DatasetManifest,
    source: &FeatureSource<'_>,
    cfg: &TrainConfig,
    pairs: &[(String, String)],
) -> Result<AblationReport, EvalError> {
    let modes = [
        ("image", ModalityMask::ImageOnly),
        ("caption", ModalityMask::TextOnly),
        ("fused", ModalityMask::Fused),
    ];
    let mut rows = Vec::new();
    for (name, mask) in modes {
        let report = cross_validate(manifest, source, &TrainConfig { mask, ..cfg.clone() })?;
        let pair_rates = pairs
            .iter()
            .map(|(t, p)| {
                let (i, j) = (report.confusion.index(t)?, report.confusion.index(p)?);
                Ok(PairRate {
                    truth: t.clone(),
                    predicted: p.clone(),
                    rate: misclassification_rate(&report.confusion, i, j).ok(),
                })
            })
            .collect::<Result<_, EvalError>>()?;
        rows.push(AblationRow {
            modality: name.into(),
            top1_mean: report.top1_mean,
            top1_std: report.top1_std,
            top3_mean: report.top3_mean,
            top3_std: report.top3_std,
            pair_rates,
        });
    }
    Ok(AblationReport { rows })
}

/// Count of examples per split, useful for sanity output.
pub fn split_sizes(manifest: &DatasetManifest) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = (0..N_FOLDS)
        .map(|k| (format!("fold {k}"), manifest.validation_examples(k).count()))
        .collect();
    out.push(("holdout".into(), manifest.holdout_examples().count()));
    out.push((
        "unassigned".into(),
        manifest.examples.iter().filter(|e| e.fold == Fold::Unassigned).count(),
    ));
    out
}
