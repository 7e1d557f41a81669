//! Post store plus the builders that turn harvested posts into labeled,
//! split dataset manifests.

mod decisions;
mod manifest;
mod store;

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use decisions::{Decision, ReviewDecisions};
pub use manifest::{DatasetManifest, Fold, LabeledExample, N_FOLDS};
pub use store::{CorpusStore, MediaSink, ProgressKind};

use crate::fusion::{predict, FeatureTable, FusionHeadParams};
use crate::scrape::{ContentHash, PostRecord};
use crate::seed::derive_seed;
use crate::text::{match_keywords, normalize, KeywordList};

pub const FOOD: &str = "food";
pub const NONFOOD: &str = "nonfood";

/// Smallest class `assign_splits` accepts.
pub const MIN_SPLIT_CLASS_SIZE: usize = 10;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt record log {path} at line {line}: {reason}")]
    Corrupt { path: String, line: usize, reason: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("malformed review decisions: {0}")]
    Decisions(String),
    #[error("no classes met threshold of {min_class_size} examples")]
    NoClassMetThreshold { min_class_size: usize },
    #[error("class {class:?} has {count} examples; at least {MIN_SPLIT_CLASS_SIZE} are needed to split")]
    ClassTooSmall { class: String, count: usize },
    #[error("bootstrap shortfall: {food} food and {nonfood} non-food candidates survive, {target} needed per class")]
    Shortfall { food: usize, nonfood: usize, target: usize },
}

/// `(example_id, content_hash)` of every downloaded image of `post`.
pub fn fetched_images(post: &PostRecord) -> impl Iterator<Item = (String, ContentHash)> + '_ {
    post.image_refs
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.content_hash.map(|h| (post.example_id(i), h)))
}

/// Food names a post is labeled with: caption matches plus keyword
/// provenance tags, in keyword-list order.
pub fn candidate_labels(post: &PostRecord, keywords: &KeywordList) -> Vec<String> {
    let doc = normalize(post.caption.as_deref().unwrap_or(""));
    let mut matched: HashSet<String> = match_keywords(&doc, keywords).into_iter().collect();
    for tag in &post.tags {
        if let Some(i) = keywords.position(tag) {
            matched.insert(keywords.keywords()[i].name.clone());
        }
    }
    keywords.names().filter(|n| matched.contains(*n)).map(str::to_string).collect()
}

/// Builds the food-type manifest: one example per fetched image of each
/// post that names exactly one food, after review decisions, keeping only
/// classes with at least `min_class_size` examples.
pub fn build_food_type_manifest(
    store: &CorpusStore,
    keywords: &KeywordList,
    min_class_size: usize,
    decisions: &ReviewDecisions,
) -> Result<DatasetManifest, CorpusError> {
    if min_class_size == 0 {
        return Err(CorpusError::Invalid("min_class_size must be at least 1".into()));
    }
    for (id, target) in decisions.relabel_targets() {
        if keywords.position(target).is_none() {
            return Err(CorpusError::Invalid(format!("{id}: relabel target {target:?} is not a known food name")));
        }
    }

    let mut candidates: Vec<(String, ContentHash, String, String)> = Vec::new();
    for post in store.sorted_records() {
        let matched = candidate_labels(post, keywords);
        for (example_id, hash) in fetched_images(post) {
            let label = match decisions.get(&example_id) {
                Some(Decision::Reject) => continue,
                Some(Decision::Relabel(target)) => {
                    keywords.keywords()[keywords.position(target).expect("validated")].name.clone()
                }
                Some(Decision::Accept) | None => match matched.as_slice() {
                    [only] => only.clone(),
                    _ => continue,
                },
            };
            candidates.push((example_id, hash, post.caption.clone().unwrap_or_default(), label));
        }
    }

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &candidates {
        *counts.entry(c.3.as_str()).or_default() += 1;
    }
    let classes: Vec<String> = keywords
        .names()
        .filter(|n| counts.get(n).copied().unwrap_or(0) >= min_class_size)
        .map(str::to_string)
        .collect();
    if classes.is_empty() {
        return Err(CorpusError::NoClassMetThreshold { min_class_size });
    }

    let examples = candidates
        .into_iter()
        .filter_map(|(example_id, content_hash, caption, label)| {
            let label = classes.iter().position(|c| *c == label)?;
            Some(LabeledExample {
                example_id,
                content_hash,
                caption,
                label,
                fold: Fold::Unassigned,
            })
        })
        .collect();
    Ok(DatasetManifest {
        dataset_name: "food_types".into(),
        classes,
        examples,
        split_seed: None,
    })
}

/// A candidate image with its detector food probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub example_id: String,
    pub content_hash: ContentHash,
    pub caption: String,
    pub food_probability: f64,
}

/// Trained two-class head and the feature tables it reads.
#[derive(Debug, Clone, Copy)]
pub struct FoodDetector<'a> {
    pub head: &'a FusionHeadParams,
    pub image_features: &'a FeatureTable,
    pub text_features: Option<&'a FeatureTable>,
    /// Output index of the food class.
    pub food_class: usize,
}

/// Scores every fetched image in `store` that is not already a positive.
/// Images without an image feature row are skipped.
pub fn score_candidates(
    positives: &DatasetManifest,
    store: &CorpusStore,
    detector: &FoodDetector<'_>,
) -> Result<Vec<ScoredCandidate>, CorpusError> {
    if detector.head.n_classes != 2 || detector.food_class > 1 {
        return Err(CorpusError::Invalid("detector must be a 2-class head".into()));
    }
    let exclude: HashSet<&str> = positives.examples.iter().map(|e| e.example_id.as_str()).collect();
    let mut out = Vec::new();
    let mut missing = 0usize;
    for post in store.sorted_records() {
        for (example_id, content_hash) in fetched_images(post) {
            if exclude.contains(example_id.as_str()) {
                continue;
            }
            let Some(img) = detector.image_features.get(&example_id) else {
                missing += 1;
                continue;
            };
            let txt = detector.text_features.and_then(|t| t.get(&example_id));
            let pred = predict(detector.head, &example_id, img, txt).map_err(|e| CorpusError::Invalid(e.to_string()))?;
            out.push(ScoredCandidate {
                food_probability: pred.probabilities[detector.food_class],
                example_id,
                content_hash,
                caption: post.caption.clone().unwrap_or_default(),
            });
        }
    }
    if missing > 0 {
        log::warn!("{missing} candidate images have no image features and were not scored");
    }
    Ok(out)
}

/// Splits candidates into (food, non-food) sides after review decisions.
pub fn partition_candidates<'a>(
    candidates: &'a [ScoredCandidate],
    threshold: f64,
    decisions: &ReviewDecisions,
) -> (Vec<&'a ScoredCandidate>, Vec<&'a ScoredCandidate>) {
    let mut food = Vec::new();
    let mut nonfood = Vec::new();
    for c in candidates {
        let is_food = match decisions.get(&c.example_id) {
            Some(Decision::Reject) => continue,
            Some(Decision::Relabel(t)) => t == FOOD,
            Some(Decision::Accept) | None => c.food_probability >= threshold,
        };
        if is_food {
            food.push(c);
        } else {
            nonfood.push(c);
        }
    }
    (food, nonfood)
}

/// Keeps the `target` highest-scoring food candidates (ties by id).
pub fn rank_food_side(food: &mut Vec<&ScoredCandidate>, target: usize) {
    food.sort_by(|a, b| {
        b.food_probability
            .total_cmp(&a.food_probability)
            .then_with(|| a.example_id.cmp(&b.example_id))
    });
    food.truncate(target);
}

/// Seeded uniform sample of `target` non-food candidates.
pub fn sample_nonfood_side(nonfood: &mut Vec<&ScoredCandidate>, target: usize, seed: u64) {
    nonfood.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bootstrap-nonfood"));
    nonfood.shuffle(&mut rng);
    nonfood.truncate(target);
}

/// Splits scored candidates into a balanced food/non-food manifest.
///
/// Food side: candidates at or above `threshold` (plus those relabeled
/// `food`), minus rejects, highest scores first. Non-food side: a seeded
/// uniform sample of the remaining candidates (plus those relabeled
/// `nonfood`), minus rejects.
pub fn select_binary(
    candidates: &[ScoredCandidate],
    threshold: f64,
    decisions: &ReviewDecisions,
    target_per_class: usize,
    seed: u64,
) -> Result<DatasetManifest, CorpusError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CorpusError::Invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    for (id, target) in decisions.relabel_targets() {
        if target != FOOD && target != NONFOOD {
            return Err(CorpusError::Invalid(format!("{id}: relabel target {target:?} must be food or nonfood")));
        }
    }
    let (mut food, mut nonfood) = partition_candidates(candidates, threshold, decisions);
    if food.len() < target_per_class || nonfood.len() < target_per_class {
        return Err(CorpusError::Shortfall {
            food: food.len(),
            nonfood: nonfood.len(),
            target: target_per_class,
        });
    }
    rank_food_side(&mut food, target_per_class);
    sample_nonfood_side(&mut nonfood, target_per_class, seed);

    let to_example = |c: &ScoredCandidate, label| LabeledExample {
        example_id: c.example_id.clone(),
        content_hash: c.content_hash,
        caption: c.caption.clone(),
        label,
        fold: Fold::Unassigned,
    };
    let examples = food
        .iter()
        .map(|c| to_example(c, 0))
        .chain(nonfood.iter().map(|c| to_example(c, 1)))
        .collect();
    Ok(DatasetManifest {
        dataset_name: "food_nonfood".into(),
        classes: vec![FOOD.into(), NONFOOD.into()],
        examples,
        split_seed: None,
    })
}

/// Scores candidates from `candidate_store` with `detector` and assembles the
/// balanced food/non-food manifest.
pub fn bootstrap_binary_manifest(
    positives: &DatasetManifest,
    candidate_store: &CorpusStore,
    detector: &FoodDetector<'_>,
    threshold: f64,
    decisions: &ReviewDecisions,
    target_per_class: usize,
    seed: u64,
) -> Result<DatasetManifest, CorpusError> {
    let scored = score_candidates(positives, candidate_store, detector)?;
    select_binary(&scored, threshold, decisions, target_per_class, seed)
}

/// Stratified holdout plus five folds. Per class, examples are shuffled with
/// a seed-derived generator, `max(1, floor(n / 10))` go to the holdout and the
/// rest are dealt round-robin into folds 0..4.
pub fn assign_splits(m: &DatasetManifest, seed: u64) -> Result<DatasetManifest, CorpusError> {
    m.validate()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); m.classes.len()];
    for (i, e) in m.examples.iter().enumerate() {
        by_class[e.label].push(i);
    }
    let mut out = m.clone();
    for (label, mut members) in by_class.into_iter().enumerate() {
        if members.len() < MIN_SPLIT_CLASS_SIZE {
            return Err(CorpusError::ClassTooSmall {
                class: m.classes[label].clone(),
                count: members.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("split/{label}")));
        members.shuffle(&mut rng);
        let holdout = (members.len() / 10).max(1);
        for (rank, &i) in members.iter().enumerate() {
            out.examples[i].fold = if rank < holdout {
                Fold::Holdout
            } else {
                Fold::Fold(((rank - holdout) % N_FOLDS as usize) as u8)
            };
        }
    }
    out.split_seed = Some(seed);
    Ok(out)
}
