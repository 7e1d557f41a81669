//! Append-only post store with a primary-key index and content-addressed media.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::scrape::{ContentHash, PostRecord};

const LOG_FILE: &str = "records.jsonl";
const MEDIA_DIR: &str = "media";

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogEntry {
    Post(PostRecord),
    Tag { primary_key: String, tag: String },
}

/// Which harvesting mode a progress file belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProgressKind {
    Location,
    Keyword,
}

impl ProgressKind {
    fn file_name(self) -> &'static str {
        match self {
            ProgressKind::Location => "progress-location.txt",
            ProgressKind::Keyword => "progress-keyword.txt",
        }
    }
}

/// Writes media files into a store's media directory. Cloneable so fetch
/// workers can persist bytes without holding the store.
#[derive(Debug, Clone)]
pub struct MediaSink {
    dir: PathBuf,
}

impl MediaSink {
    /// Stores bytes under their digest and returns (digest, store-relative path).
    pub fn write(&self, bytes: &[u8]) -> Result<(ContentHash, String), CorpusError> {
        let hash = ContentHash::of(bytes);
        let name = hash.to_hex();
        let path = self.dir.join(&name);
        if !path.exists() {
            let tmp = self.dir.join(format!(".{name}.{}.tmp", std::process::id()));
            fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        }
        Ok((hash, format!("{MEDIA_DIR}/{name}")))
    }
}

fn io_err(path: &Path, source: io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub struct CorpusStore {
    root: PathBuf,
    log: File,
    records: Vec<PostRecord>,
    index: HashMap<String, usize>,
}

impl std::fmt::Debug for CorpusStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CorpusStore")
            .field("root", &self.root)
            .field("records", &self.records.len())
            .finish()
    }
}

impl CorpusStore {
    /// Opens (creating if needed) a store rooted at `root`. A torn final log
    /// line from an interrupted write is discarded.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let root = root.as_ref().to_path_buf();
        let media = root.join(MEDIA_DIR);
        fs::create_dir_all(&media).map_err(|e| io_err(&media, e))?;
        let log_path = root.join(LOG_FILE);

        let mut records = Vec::new();
        let mut index = HashMap::new();
        if log_path.exists() {
            let text = fs::read_to_string(&log_path).map_err(|e| io_err(&log_path, e))?;
            let complete = match text.rfind('\n') {
                Some(i) => i + 1,
                None => 0,
            };
            if complete < text.len() {
                log::warn!("discarding torn record at end of {}", log_path.display());
                let f = OpenOptions::new().write(true).open(&log_path).map_err(|e| io_err(&log_path, e))?;
                f.set_len(complete as u64).map_err(|e| io_err(&log_path, e))?;
            }
            for (lineno, line) in text[..complete].lines().enumerate() {
                let entry: LogEntry = serde_json::from_str(line).map_err(|e| CorpusError::Corrupt {
                    path: log_path.display().to_string(),
                    line: lineno + 1,
                    reason: e.to_string(),
                })?;
                apply(&mut records, &mut index, entry);
            }
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| io_err(&log_path, e))?;
        Ok(Self {
            root,
            log,
            records,
            index,
        })
    }

    /// Builds a fresh store at `root` from a canonical dump.
    pub fn import_dump(root: impl AsRef<Path>, dump: &str) -> Result<Self, CorpusError> {
        let mut store = Self::open(root)?;
        for (lineno, line) in dump.lines().enumerate() {
            let record: PostRecord = serde_json::from_str(line).map_err(|e| CorpusError::Corrupt {
                path: "<dump>".into(),
                line: lineno + 1,
                reason: e.to_string(),
            })?;
            store.ingest_post(record)?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn media_sink(&self) -> MediaSink {
        MediaSink {
            dir: self.root.join(MEDIA_DIR),
        }
    }

    pub fn media_path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, primary_key: &str) -> bool {
        self.index.contains_key(primary_key)
    }

    pub fn get(&self, primary_key: &str) -> Option<&PostRecord> {
        self.index.get(primary_key).map(|&i| &self.records[i])
    }

    /// Records in insertion order.
    pub fn records(&self) -> &[PostRecord] {
        &self.records
    }

    /// Records ordered by primary key.
    pub fn sorted_records(&self) -> Vec<&PostRecord> {
        let mut v: Vec<&PostRecord> = self.records.iter().collect();
        v.sort_by(|a, b| a.primary_key.cmp(&b.primary_key));
        v
    }

    pub fn keys(&self) -> HashSet<String> {
        self.index.keys().cloned().collect()
    }

    fn append(&mut self, entry: &LogEntry) -> Result<(), CorpusError> {
        let mut line = serde_json::to_string(entry).expect("log entries serialize");
        line.push('\n');
        let path = self.root.join(LOG_FILE);
        self.log.write_all(line.as_bytes()).map_err(|e| io_err(&path, e))?;
        self.log.flush().map_err(|e| io_err(&path, e))
    }

    /// Inserts a post unless its primary key is already present.
    pub fn ingest_post(&mut self, post: PostRecord) -> Result<bool, CorpusError> {
        if post.primary_key.is_empty() {
            return Err(CorpusError::Invalid("post has an empty primary_key".into()));
        }
        if self.index.contains_key(&post.primary_key) {
            return Ok(false);
        }
        let mut post = post;
        post.tags = post.tags.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let entry = LogEntry::Post(post);
        self.append(&entry)?;
        apply(&mut self.records, &mut self.index, entry);
        Ok(true)
    }

    /// Adds provenance tags to an existing post; returns how many were new.
    pub fn add_tags(&mut self, primary_key: &str, tags: &[String]) -> Result<usize, CorpusError> {
        let Some(&i) = self.index.get(primary_key) else {
            return Err(CorpusError::Invalid(format!("no record with primary_key {primary_key:?}")));
        };
        let mut added = 0;
        for tag in tags {
            if self.records[i].tags.contains(tag) {
                continue;
            }
            let entry = LogEntry::Tag {
                primary_key: primary_key.to_string(),
                tag: tag.clone(),
            };
            self.append(&entry)?;
            apply(&mut self.records, &mut self.index, entry);
            added += 1;
        }
        Ok(added)
    }

    /// Forces the record log to stable storage.
    pub fn sync(&self) -> Result<(), CorpusError> {
        self.log.sync_data().map_err(|e| io_err(&self.root.join(LOG_FILE), e))
    }

    /// One JSON record per line, sorted by primary key, tags sorted.
    pub fn canonical_dump(&self) -> String {
        let mut out = String::new();
        for r in self.sorted_records() {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn completed(&self, kind: ProgressKind) -> Result<HashSet<String>, CorpusError> {
        let path = self.root.join(kind.file_name());
        match fs::read_to_string(&path) {
            Ok(text) => Ok(text
                .lines()
                .filter_map(|l| l.strip_prefix("DONE "))
                .map(str::to_string)
                .collect()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(HashSet::new()),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    /// Records a completed unit of work after syncing the record log.
    pub fn mark_done(&self, kind: ProgressKind, id: &str) -> Result<(), CorpusError> {
        self.sync()?;
        let path = self.root.join(kind.file_name());
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        writeln!(f, "DONE {id}").map_err(|e| io_err(&path, e))?;
        f.sync_data().map_err(|e| io_err(&path, e))
    }

    pub fn clear_progress(&self, kind: ProgressKind) -> Result<(), CorpusError> {
        let path = self.root.join(kind.file_name());
        match fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

fn apply(records: &mut Vec<PostRecord>, index: &mut HashMap<String, usize>, entry: LogEntry) {
    match entry {
        LogEntry::Post(p) => {
            if !index.contains_key(&p.primary_key) {
                index.insert(p.primary_key.clone(), records.len());
                records.push(p);
            }
        }
        LogEntry::Tag { primary_key, tag } => {
            if let Some(&i) = index.get(&primary_key) {
                let tags = &mut records[i].tags;
                if let Err(pos) = tags.binary_search(&tag) {
                    tags.insert(pos, tag);
                }
            }
        }
    }
}
