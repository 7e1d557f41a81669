//! Caption normalization, food-name matching and hashtag stripping.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_KEYWORDS: &str = include_str!("../data/keywords_sw.txt");
const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

#[derive(Debug, Error)]
pub enum TextError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("keyword {0:?} normalizes to nothing")]
    EmptyKeyword(String),
    #[error("keyword {0:?} duplicates an earlier entry after normalization")]
    DuplicateKeyword(String),
}

/// A caption split into lowercase word tokens and hashtag bodies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionDoc {
    pub raw: String,
    pub tokens: Vec<String>,
    pub hashtags: Vec<String>,
}

impl CaptionDoc {
    /// Renders tokens then hashtags back into a caption string.
    pub fn detokenize(&self) -> String {
        self.tokens
            .iter()
            .cloned()
            .chain(self.hashtags.iter().map(|h| format!("#{h}")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty() && self.hashtags.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PieceKind {
    Token,
    Hashtag,
}

#[derive(Debug)]
struct Piece {
    kind: PieceKind,
    text: String,
    /// Byte span in the raw text, including the leading '#' for hashtags.
    span: Range<usize>,
}

// A character belongs to a word when its whole lowercase expansion is
// alphanumeric; this keeps tokenization stable under re-normalization.
fn lowercase_word_char(c: char) -> Option<impl Iterator<Item = char>> {
    let lower = c.to_lowercase();
    if lower.clone().all(char::is_alphanumeric) {
        Some(lower)
    } else {
        None
    }
}

fn scan(raw: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let mut chars = raw.char_indices().peekable();
    let mut current: Option<Piece> = None;

    let flush = |current: &mut Option<Piece>, pieces: &mut Vec<Piece>| {
        if let Some(p) = current.take() {
            if !p.text.is_empty() {
                pieces.push(p);
            }
        }
    };

    while let Some((i, c)) = chars.next() {
        if c == '#' {
            flush(&mut current, &mut pieces);
            let mut body = String::new();
            let mut end = i + 1;
            while let Some(&(j, next)) = chars.peek() {
                match lowercase_word_char(next) {
                    Some(lower) => {
                        body.extend(lower);
                        end = j + next.len_utf8();
                        chars.next();
                    }
                    None => break,
                }
            }
            if !body.is_empty() {
                pieces.push(Piece {
                    kind: PieceKind::Hashtag,
                    text: body,
                    span: i..end,
                });
            }
            continue;
        }
        match lowercase_word_char(c) {
            Some(lower) => {
                let piece = current.get_or_insert_with(|| Piece {
                    kind: PieceKind::Token,
                    text: String::new(),
                    span: i..i,
                });
                piece.text.extend(lower);
                piece.span.end = i + c.len_utf8();
            }
            None => flush(&mut current, &mut pieces),
        }
    }
    flush(&mut current, &mut pieces);
    pieces
}

pub fn normalize(raw: &str) -> CaptionDoc {
    let mut doc = CaptionDoc {
        raw: raw.to_string(),
        ..Default::default()
    };
    for piece in scan(raw) {
        match piece.kind {
            PieceKind::Token => doc.tokens.push(piece.text),
            PieceKind::Hashtag => doc.hashtags.push(piece.text),
        }
    }
    doc
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keyword {
    /// Normalized name: lowercase tokens joined by single spaces.
    pub name: String,
    pub tokens: Vec<String>,
    /// Name with spaces removed, the form used as a hashtag.
    pub concatenated: String,
}

/// Ordered list of food names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordList {
    keywords: Vec<Keyword>,
}

impl KeywordList {
    pub fn from_names<I, S>(names: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut keywords = Vec::new();
        let mut seen = HashSet::new();
        for raw in names {
            let raw = raw.as_ref();
            let tokens = normalize(raw).tokens;
            if tokens.is_empty() {
                return Err(TextError::EmptyKeyword(raw.to_string()));
            }
            let name = tokens.join(" ");
            if !seen.insert(name.clone()) {
                return Err(TextError::DuplicateKeyword(raw.to_string()));
            }
            keywords.push(Keyword {
                concatenated: tokens.concat(),
                name,
                tokens,
            });
        }
        Ok(Self { keywords })
    }

    /// Parses a one-name-per-line list; `#` comment lines are skipped.
    pub fn parse(text: &str) -> Result<Self, TextError> {
        Self::from_names(list_entries(text))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        Self::parse(&read_text(path.as_ref())?)
    }

    /// The shipped list of 38 Kiswahili food names.
    pub fn kiswahili_default() -> Self {
        Self::parse(DEFAULT_KEYWORDS).expect("shipped keyword list is valid")
    }

    pub fn keywords(&self) -> &[Keyword] {
        &self.keywords
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.keywords.iter().map(|k| k.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        let tokens = normalize(name).tokens.join(" ");
        self.keywords.iter().position(|k| k.name == tokens)
    }
}

fn read_text(path: &Path) -> Result<String, TextError> {
    fs::read_to_string(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn list_entries(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

pub fn parse_stopwords(text: &str) -> HashSet<String> {
    list_entries(text).map(|w| w.to_lowercase()).collect()
}

pub fn load_stopwords(path: impl AsRef<Path>) -> Result<HashSet<String>, TextError> {
    Ok(parse_stopwords(&read_text(path.as_ref())?))
}

/// English and Kiswahili function words.
pub fn default_stopwords() -> HashSet<String> {
    parse_stopwords(DEFAULT_STOPWORDS)
}

/// Names from `kw` found in the caption, in list order, without repeats.
///
/// A name matches when its tokens occur contiguously in the caption tokens,
/// or when its concatenated form equals a hashtag or a single token.
pub fn match_keywords(doc: &CaptionDoc, kw: &KeywordList) -> Vec<String> {
    let hashtags: HashSet<&str> = doc.hashtags.iter().map(String::as_str).collect();
    let tokens: HashSet<&str> = doc.tokens.iter().map(String::as_str).collect();
    kw.keywords
        .iter()
        .filter(|k| {
            hashtags.contains(k.concatenated.as_str())
                || tokens.contains(k.concatenated.as_str())
                || doc.tokens.windows(k.tokens.len()).any(|w| w == k.tokens.as_slice())
        })
        .map(|k| k.name.clone())
        .collect()
}

/// Removes hashtags naming a food; plain-text mentions are left alone.
/// Whitespace around each removed hashtag collapses to one space, or to
/// nothing at either end of the text.
pub fn strip_food_name_hashtags(raw: &str, kw: &KeywordList) -> String {
    let foods: HashSet<&str> = kw.keywords.iter().map(|k| k.concatenated.as_str()).collect();
    let mut out = String::with_capacity(raw.len());
    let mut cursor = 0;
    let mut pending_space = false;

    for piece in scan(raw) {
        if piece.kind != PieceKind::Hashtag || !foods.contains(piece.text.as_str()) {
            continue;
        }
        let before = &raw[cursor..piece.span.start];
        if !before.is_empty() {
            if pending_space && !before.starts_with(char::is_whitespace) {
                out.push(' ');
            }
            let trimmed_start = if pending_space { before.trim_start() } else { before };
            out.push_str(trimmed_start);
        }
        let ws_left = out.ends_with(char::is_whitespace);
        out.truncate(out.trim_end().len());
        let after = &raw[piece.span.end..];
        let ws_right = after.starts_with(char::is_whitespace);
        pending_space = pending_space || ws_left || ws_right;
        if out.is_empty() {
            pending_space = false;
        }
        cursor = piece.span.end + (after.len() - after.trim_start().len());
    }

    let rest = &raw[cursor..];
    if !rest.is_empty() && pending_space {
        out.push(' ');
    }
    out.push_str(rest);
    out
}

/// Token counts across captions, excluding stopwords.
pub fn word_frequencies<S: AsRef<str>>(captions: &[S], stopwords: &HashSet<String>) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for caption in captions {
        for token in normalize(caption.as_ref()).tokens {
            if !stopwords.contains(&token) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Export order: count descending, then word ascending.
pub fn sorted_frequencies(counts: &HashMap<String, u64>) -> Vec<(String, u64)> {
    let ordered: BTreeMap<(std::cmp::Reverse<u64>, &str), ()> = counts
        .iter()
        .map(|(w, c)| ((std::cmp::Reverse(*c), w.as_str()), ()))
        .collect();
    ordered.into_keys().map(|(c, w)| (w.to_string(), c.0)).collect()
}
