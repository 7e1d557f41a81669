//! Deterministic in-memory world implementing [`PostProvider`].

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::provider::{PostProvider, ProviderError};
use super::types::{GeoTag, LocationRecord, MediaRef, Page, PostRecord, PostSource};
use crate::geogrid::{GeoBoundingBox, GridPoint};
use crate::text::{normalize, KeywordList};

/// 2019-03-07T00:00:00Z, start of the simulated 20-day window.
const WINDOW_START: i64 = 1_551_916_800;
const WINDOW_SECONDS: i64 = 20 * 24 * 3600;
const MEDIA_BYTES: usize = 256;

const FILLER: &[&str] = &[
    "love", "kenya", "nairobi", "travel", "africa", "friends", "weekend", "lunch", "dinner", "delicious", "tamu",
    "chakula", "family", "happy", "sunday", "foodie", "yummy", "home", "vibes", "mombasa", "sunset", "coffee",
    "morning", "party", "birthday", "the", "and", "with", "my", "so", "good", "today", "safari", "beach",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorldConfig {
    pub seed: u64,
    pub n_locations: usize,
    /// Inclusive range of posts per location.
    pub posts_per_location: [usize; 2],
    pub keyword_caption_probability: f64,
    pub boxes: Vec<GeoBoundingBox>,
    /// Food names used for caption hashtags; empty means the shipped list.
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default = "default_page_size")]
    pub page_size: usize,
}

fn default_page_size() -> usize {
    4
}

impl SimWorldConfig {
    pub fn new(seed: u64, n_locations: usize, posts_per_location: [usize; 2], boxes: Vec<GeoBoundingBox>) -> Self {
        Self {
            seed,
            n_locations,
            posts_per_location,
            keyword_caption_probability: 0.3,
            boxes,
            keywords: Vec::new(),
            page_size: default_page_size(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let p = self.keyword_caption_probability;
        if !(0.0..=1.0).contains(&p) {
            return Err(format!("keyword_caption_probability {p} outside [0, 1]"));
        }
        if self.posts_per_location[0] > self.posts_per_location[1] {
            return Err("posts_per_location range is empty".into());
        }
        if self.n_locations > 0 && self.boxes.is_empty() {
            return Err("boxes must not be empty".into());
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate(&format!("boxes[{i}]")).map_err(|e| e.to_string())?;
        }
        if self.page_size == 0 {
            return Err("page_size must be positive".into());
        }
        Ok(())
    }

    fn keyword_list(&self) -> Result<KeywordList, String> {
        if self.keywords.is_empty() {
            Ok(KeywordList::kiswahili_default())
        } else {
            KeywordList::from_names(&self.keywords).map_err(|e| e.to_string())
        }
    }
}

#[derive(Debug, Clone)]
struct SimLocation {
    record: LocationRecord,
    posts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SimulatedProvider {
    locations: Vec<SimLocation>,
    location_index: HashMap<String, usize>,
    posts: Vec<PostRecord>,
    by_hashtag: HashMap<String, Vec<usize>>,
    page_size: usize,
}

/// Builds the world described by `cfg`. Identical configs give identical worlds.
pub fn simulate_world(cfg: &SimWorldConfig) -> Result<SimulatedProvider, String> {
    cfg.validate()?;
    let keywords = cfg.keyword_list()?;
    let tags: Vec<&str> = keywords.keywords().iter().map(|k| k.concatenated.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut locations = Vec::with_capacity(cfg.n_locations);
    let mut posts = Vec::new();

    for l in 0..cfg.n_locations {
        let b = cfg.boxes[rng.gen_range(0..cfg.boxes.len())];
        let lat = b.min_lat + rng.gen::<f64>() * (b.max_lat - b.min_lat);
        let lon = b.min_lon + rng.gen::<f64>() * (b.max_lon - b.min_lon);
        let location_id = format!("{:x}{:06}", cfg.seed % 0xffff, l);
        let n_posts = rng.gen_range(cfg.posts_per_location[0]..=cfg.posts_per_location[1]);
        let mut owned = Vec::with_capacity(n_posts);
        for j in 0..n_posts {
            let primary_key = format!("{location_id}_{j:04}");
            let caption = if rng.gen_bool(0.9) {
                Some(synth_caption(&mut rng, &tags, cfg.keyword_caption_probability))
            } else {
                None
            };
            let n_images = rng.gen_range(1..=2);
            owned.push(posts.len());
            posts.push(PostRecord {
                post_id: format!("{}", rng.gen::<u64>() >> 8),
                image_refs: (0..n_images)
                    .map(|k| MediaRef::unfetched(format!("sim://media/{primary_key}/{k}")))
                    .collect(),
                caption,
                geo: Some(GeoTag {
                    lat,
                    lon,
                    location_id: location_id.clone(),
                }),
                timestamp: WINDOW_START + rng.gen_range(0..WINDOW_SECONDS),
                source: PostSource::ByLocation,
                tags: Vec::new(),
                primary_key,
            });
        }
        locations.push(SimLocation {
            record: LocationRecord {
                location_id,
                name: format!("Venue {l}"),
                lat,
                lon,
            },
            posts: owned,
        });
    }

    let mut by_hashtag: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, p) in posts.iter().enumerate() {
        if let Some(c) = &p.caption {
            let mut hashtags = normalize(c).hashtags;
            hashtags.sort();
            hashtags.dedup();
            for h in hashtags {
                by_hashtag.entry(h).or_default().push(i);
            }
        }
    }

    let location_index = locations
        .iter()
        .enumerate()
        .map(|(i, l)| (l.record.location_id.clone(), i))
        .collect();
    Ok(SimulatedProvider {
        locations,
        location_index,
        posts,
        by_hashtag,
        page_size: cfg.page_size,
    })
}

fn synth_caption(rng: &mut ChaCha8Rng, tags: &[&str], p: f64) -> String {
    let n_words = rng.gen_range(3..=8);
    let mut words: Vec<String> = (0..n_words)
        .map(|_| FILLER.choose(rng).expect("filler is non-empty").to_string())
        .collect();
    if !tags.is_empty() && rng.gen_bool(p) {
        words.push(format!("#{}", tags.choose(rng).unwrap()));
        if rng.gen_bool(p * 0.25) {
            words.push(format!("#{}", tags.choose(rng).unwrap()));
        }
    }
    if rng.gen_bool(0.3) {
        words.push("#kenya".into());
    }
    words.join(" ")
}

/// Deterministic stand-in bytes for a media URL.
pub fn sim_media_bytes(url: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(MEDIA_BYTES);
    let mut block: [u8; 32] = Sha256::digest(format!("simmedia:{url}").as_bytes()).into();
    while out.len() < MEDIA_BYTES {
        out.extend_from_slice(&block);
        block = Sha256::digest(block).into();
    }
    out
}

fn paginate<T: Clone>(items: &[T], cursor: Option<&str>, page_size: usize) -> Result<Page<T>, ProviderError> {
    let start = match cursor {
        None => 0,
        Some(c) => c
            .parse::<usize>()
            .map_err(|_| ProviderError::Fatal(format!("malformed cursor {c:?}")))?,
    };
    let start = start.min(items.len());
    let end = (start + page_size).min(items.len());
    Ok(Page {
        items: items[start..end].to_vec(),
        next_cursor: (end < items.len()).then(|| end.to_string()),
    })
}

impl SimulatedProvider {
    /// Every post in the world, in generation order.
    pub fn posts(&self) -> &[PostRecord] {
        &self.posts
    }

    pub fn locations(&self) -> impl Iterator<Item = &LocationRecord> {
        self.locations.iter().map(|l| &l.record)
    }

    /// Posts carrying `#tag` (tag compared in lowercase).
    pub fn posts_with_hashtag(&self, tag: &str) -> Vec<&PostRecord> {
        self.by_hashtag
            .get(&tag.to_lowercase())
            .map(|ids| ids.iter().map(|&i| &self.posts[i]).collect())
            .unwrap_or_default()
    }

    fn keyword_hits(&self, keyword: &str) -> Vec<PostRecord> {
        let concatenated: String = normalize(keyword).tokens.concat();
        self.by_hashtag
            .get(&concatenated)
            .map(|ids| {
                ids.iter()
                    .map(|&i| PostRecord {
                        source: PostSource::ByKeyword,
                        ..self.posts[i].clone()
                    })
                    .collect()
            })
            .unwrap_or_default()
    }
}

impl PostProvider for SimulatedProvider {
    fn search_locations_near(
        &self,
        point: GridPoint,
        radius_deg: f64,
        cursor: Option<&str>,
    ) -> Result<Page<LocationRecord>, ProviderError> {
        let near: Vec<LocationRecord> = self
            .locations
            .iter()
            .filter(|l| (l.record.lat - point.lat).abs() <= radius_deg && (l.record.lon - point.lon).abs() <= radius_deg)
            .map(|l| l.record.clone())
            .collect();
        paginate(&near, cursor, self.page_size)
    }

    fn fetch_posts_by_location(&self, location_id: &str, cursor: Option<&str>) -> Result<Page<PostRecord>, ProviderError> {
        let Some(&i) = self.location_index.get(location_id) else {
            return Ok(Page {
                items: Vec::new(),
                next_cursor: None,
            });
        };
        let posts: Vec<PostRecord> = self.locations[i].posts.iter().map(|&p| self.posts[p].clone()).collect();
        paginate(&posts, cursor, self.page_size)
    }

    fn search_posts_by_keyword(&self, keyword: &str, cursor: Option<&str>) -> Result<Page<PostRecord>, ProviderError> {
        paginate(&self.keyword_hits(keyword), cursor, self.page_size)
    }

    fn fetch_media(&self, url: &str) -> Result<Vec<u8>, ProviderError> {
        if url.starts_with("sim://media/") {
            Ok(sim_media_bytes(url))
        } else {
            Err(ProviderError::Transient(format!("unknown media url {url}")))
        }
    }
}
