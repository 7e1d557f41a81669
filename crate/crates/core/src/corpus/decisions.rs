use std::collections::HashMap;
use std::path::Path;

use super::CorpusError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
    Relabel(String),
}

/// Outcomes of manual review keyed by example id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReviewDecisions {
    decisions: HashMap<String, Decision>,
}

impl ReviewDecisions {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, example_id: impl Into<String>, decision: Decision) {
        self.decisions.insert(example_id.into(), decision);
    }

    pub fn get(&self, example_id: &str) -> Option<&Decision> {
        self.decisions.get(example_id)
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    pub fn relabel_targets(&self) -> impl Iterator<Item = (&str, &str)> {
        self.decisions.iter().filter_map(|(id, d)| match d {
            Decision::Relabel(c) => Some((id.as_str(), c.as_str())),
            _ => None,
        })
    }

    /// Parses `example_id,decision[,new_label]` rows. An optional header row
    /// starting with `example_id` is skipped. Later rows override earlier ones.
    pub fn from_csv(text: &str) -> Result<Self, CorpusError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut out = Self::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| CorpusError::Decisions(format!("row {}: {e}", i + 1)))?;
            let id = row.get(0).unwrap_or("");
            if i == 0 && id == "example_id" {
                continue;
            }
            if id.is_empty() {
                return Err(CorpusError::Decisions(format!("row {}: empty example_id", i + 1)));
            }
            let decision = match (row.get(1).map(str::to_ascii_lowercase).as_deref(), row.get(2)) {
                (Some("accept"), _) => Decision::Accept,
                (Some("reject"), _) => Decision::Reject,
                (Some("relabel"), Some(label)) if !label.is_empty() => Decision::Relabel(label.to_string()),
                (Some("relabel"), _) => {
                    return Err(CorpusError::Decisions(format!("row {}: relabel needs a new label", i + 1)))
                }
                (other, _) => {
                    return Err(CorpusError::Decisions(format!("row {}: unknown decision {:?}", i + 1, other)))
                }
            };
            out.insert(id, decision);
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv(&text)
    }
}
