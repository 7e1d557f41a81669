use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// SHA-256 digest of fetched media bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid content hash {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationRecord {
    pub location_id: String,
    pub name: String,
    pub lat: f64,
    pub lon: f64,
}

/// Media attached to a post. `local_path` and `content_hash` are set together
/// once the bytes have been fetched.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaRef {
    pub url: String,
    #[serde(default)]
    pub local_path: Option<String>,
    #[serde(default)]
    pub content_hash: Option<ContentHash>,
}

impl MediaRef {
    pub fn unfetched(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            local_path: None,
            content_hash: None,
        }
    }

    pub fn is_fetched(&self) -> bool {
        self.content_hash.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoTag {
    pub lat: f64,
    pub lon: f64,
    pub location_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostSource {
    ByLocation,
    ByKeyword,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostRecord {
    pub primary_key: String,
    pub post_id: String,
    pub image_refs: Vec<MediaRef>,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub geo: Option<GeoTag>,
    /// UTC seconds.
    pub timestamp: i64,
    pub source: PostSource,
    /// Keywords whose search returned this post.
    #[serde(default)]
    pub tags: Vec<String>,
}

impl PostRecord {
    /// Example id for one image of this post.
    pub fn example_id(&self, image_index: usize) -> String {
        format!("{}#{}", self.primary_key, image_index)
    }
}

/// One page of provider results; `next_cursor` is `None` on the final page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    #[serde(default)]
    pub next_cursor: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScrapeStats {
    pub locations_found: u64,
    pub posts_fetched: u64,
    pub posts_deduped: u64,
    pub images_fetched: u64,
    pub errors: u64,
    pub wall_time: f64,
}
