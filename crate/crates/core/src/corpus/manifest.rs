use std::collections::HashSet;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::CorpusError;
use crate::scrape::ContentHash;

pub const N_FOLDS: u8 = 5;

/// Split assignment of one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fold {
    Fold(u8),
    Holdout,
    Unassigned,
}

impl Serialize for Fold {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Fold::Fold(k) => s.serialize_u8(*k),
            Fold::Holdout => s.serialize_str("HOLDOUT"),
            Fold::Unassigned => s.serialize_str("UNASSIGNED"),
        }
    }
}

impl<'de> Deserialize<'de> for Fold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct FoldVisitor;
        impl Visitor<'_> for FoldVisitor {
            type Value = Fold;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a fold index 0..{N_FOLDS}, \"HOLDOUT\" or \"UNASSIGNED\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Fold, E> {
                if v < N_FOLDS as u64 {
                    Ok(Fold::Fold(v as u8))
                } else {
                    Err(E::custom(format!("fold {v} out of range")))
                }
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Fold, E> {
                if v < 0 {
                    return Err(E::custom(format!("fold {v} out of range")));
                }
                self.visit_u64(v as u64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Fold, E> {
                match v {
                    "HOLDOUT" => Ok(Fold::Holdout),
                    "UNASSIGNED" => Ok(Fold::Unassigned),
                    _ => Err(E::custom(format!("unknown fold {v:?}"))),
                }
            }
        }
        d.deserialize_any(FoldVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub example_id: String,
    pub content_hash: ContentHash,
    #[serde(default)]
    pub caption: String,
    pub label: usize,
    pub fold: Fold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestHeader {
    dataset_name: String,
    classes: Vec<String>,
    split_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub dataset_name: String,
    pub classes: Vec<String>,
    pub examples: Vec<LabeledExample>,
    pub split_seed: Option<u64>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for e in &self.examples {
            if e.label >= self.classes.len() {
                return Err(CorpusError::Invalid(format!(
                    "example {} has label {} but only {} classes",
                    e.example_id,
                    e.label,
                    self.classes.len()
                )));
            }
            if !seen.insert(e.example_id.as_str()) {
                return Err(CorpusError::Invalid(format!("duplicate example_id {}", e.example_id)));
            }
        }
        let names: HashSet<&str> = self.classes.iter().map(String::as_str).collect();
        if names.len() != self.classes.len() {
            return Err(CorpusError::Invalid("duplicate class names".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn has_splits(&self) -> bool {
        !self.examples.is_empty() && self.examples.iter().all(|e| e.fold != Fold::Unassigned)
    }

    /// Training examples when fold `k` is held out for validation.
    pub fn train_examples(&self, k: u8) -> impl Iterator<Item = &LabeledExample> {
        self.examples
            .iter()
            .filter(move |e| matches!(e.fold, Fold::Fold(f) if f != k))
    }

    pub fn validation_examples(&self, k: u8) -> impl Iterator<Item = &LabeledExample> {
        self.examples.iter().filter(move |e| e.fold == Fold::Fold(k))
    }

    pub fn holdout_examples(&self) -> impl Iterator<Item = &LabeledExample> {
        self.examples.iter().filter(|e| e.fold == Fold::Holdout)
    }

    /// Appends another manifest's examples, mapping labels by class name.
    /// New class names are appended; duplicate example ids are skipped.
    pub fn merge(&mut self, other: &DatasetManifest) {
        let mut ids: HashSet<String> = self.examples.iter().map(|e| e.example_id.clone()).collect();
        for e in &other.examples {
            if !ids.insert(e.example_id.clone()) {
                continue;
            }
            let name = &other.classes[e.label];
            let label = match self.class_index(name) {
                Some(i) => i,
                None => {
                    self.classes.push(name.clone());
                    self.classes.len() - 1
                }
            };
            self.examples.push(LabeledExample { label, ..e.clone() });
        }
    }

    pub fn to_jsonl(&self) -> String {
        let header = ManifestHeader {
            dataset_name: self.dataset_name.clone(),
            classes: self.classes.clone(),
            split_seed: self.split_seed,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.examples {
            out.push_str(&serde_json::to_string(e).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, CorpusError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| CorpusError::Manifest("empty manifest".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(first).map_err(|e| CorpusError::Manifest(format!("line 1: {e}")))?;
        let examples = lines
            .map(|(i, l)| {
                serde_json::from_str::<LabeledExample>(l)
                    .map_err(|e| CorpusError::Manifest(format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let m = Self {
            dataset_name: header.dataset_name,
            classes: header.classes,
            examples,
            split_seed: header.split_seed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_jsonl(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let io = |source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(self.to_jsonl().as_bytes()).map_err(io)?;
        w.flush().map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(id: &str, label: usize, fold: Fold) -> LabeledExample {
        LabeledExample {
            example_id: id.into(),
            content_hash: ContentHash::of(id.as_bytes()),
            caption: format!("caption {id}"),
            label,
            fold,
        }
    }

    #[test]
    fn jsonl_round_trip_and_fold_encoding() {
        let m = DatasetManifest {
            dataset_name: "demo".into(),
            classes: vec!["ugali".into(), "pilau".into()],
            examples: vec![
                example("a#0", 0, Fold::Fold(3)),
                example("b#0", 1, Fold::Holdout),
                example("c#0", 1, Fold::Unassigned),
            ],
            split_seed: Some(9),
        };
        let text = m.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], r#"{"dataset_name":"demo","classes":["ugali","pilau"],"split_seed":9}"#);
        assert!(lines[1].ends_with(r#""label":0,"fold":3}"#));
        assert!(lines[2].ends_with(r#""fold":"HOLDOUT"}"#));
        assert!(lines[3].ends_with(r#""fold":"UNASSIGNED"}"#));
        assert_eq!(DatasetManifest::from_jsonl(&text).unwrap(), m);
    }

    #[test]
    fn validation_errors() {
        let mut m = DatasetManifest {
            dataset_name: "x".into(),
            classes: vec!["a".into()],
            examples: vec![example("e", 1, Fold::Unassigned)],
            split_seed: None,
        };
        assert!(m.validate().is_err());
        m.examples = vec![example("e", 0, Fold::Unassigned), example("e", 0, Fold::Unassigned)];
        assert!(m.validate().is_err());
        assert!(DatasetManifest::from_jsonl("").is_err());
        let bad_fold = format!(
            "{}\n{}",
            r#"{"dataset_name":"x","classes":["a"],"split_seed":null}"#,
            r#"{"example_id":"e","content_hash":"00","caption":"","label":0,"fold":7}"#
        );
        assert!(matches!(DatasetManifest::from_jsonl(&bad_fold), Err(CorpusError::Manifest(_))));
    }

    #[test]
    fn merge_maps_classes_by_name() {
        let mut a = DatasetManifest {
            dataset_name: "a".into(),
            classes: vec!["food".into()],
            examples: vec![example("x", 0, Fold::Unassigned)],
            split_seed: None,
        };
        let b = DatasetManifest {
            dataset_name: "b".into(),
            classes: vec!["nonfood".into(), "food".into()],
            examples: vec![example("y", 1, Fold::Unassigned), example("z", 0, Fold::Unassigned), example("x", 1, Fold::Unassigned)],
            split_seed: None,
        };
        a.merge(&b);
        assert_eq!(a.classes, ["food", "nonfood"]);
        assert_eq!(a.examples.len(), 3);
        assert_eq!(a.examples[1].label, 0);
        assert_eq!(a.examples[2].label, 1);
    }
}
