//! Location- and keyword-driven harvesting through a [`PostProvider`].
//!
//! Fetch workers issue provider calls through a shared [`RateLimiter`] and
//! hand finished posts to a single writer that owns the [`CorpusStore`].
//! Each completed location or keyword is checkpointed in the store's progress
//! file; an interrupted run picks up where it stopped, and a run that
//! completes clears its progress file.

mod http;
mod provider;
mod ratelimit;
mod sim;
mod types;

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{HttpProvider, ENDPOINT_VAR, TOKEN_VAR};
pub use provider::{PostProvider, ProviderError};
pub use ratelimit::RateLimiter;
pub use sim::{sim_media_bytes, simulate_world, SimWorldConfig, SimulatedProvider};
pub use types::{ContentHash, GeoTag, LocationRecord, MediaRef, Page, PostRecord, PostSource, ScrapeStats};

use crate::corpus::{CorpusError, CorpusStore, MediaSink, ProgressKind};
use crate::geogrid::{enumerate_grid, GridPoint, GridSpec};
use crate::text::KeywordList;

#[derive(Debug, Error)]
pub enum ScrapeError {
    #[error("invalid scrape input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] CorpusError),
    #[error("scrape aborted: {reason}")]
    Aborted { reason: String, stats: ScrapeStats },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScrapeLimits {
    pub max_requests_per_second: f64,
    pub max_retries: u32,
    /// Seconds; retry `n` waits `backoff_base * 2^n`, ±20% jitter.
    pub backoff_base: f64,
    pub max_concurrent_fetchers: usize,
    /// Radius passed to location search around each grid point.
    #[serde(default = "default_radius")]
    pub search_radius_deg: f64,
}

fn default_radius() -> f64 {
    crate::geogrid::DEFAULT_STRIDE_DEG
}

impl Default for ScrapeLimits {
    fn default() -> Self {
        Self {
            max_requests_per_second: 5.0,
            max_retries: 3,
            backoff_base: 0.5,
            max_concurrent_fetchers: 4,
            search_radius_deg: default_radius(),
        }
    }
}

impl ScrapeLimits {
    pub fn validate(&self) -> Result<(), ScrapeError> {
        let bad = |m: &str| Err(ScrapeError::Invalid(m.to_string()));
        if !(self.max_requests_per_second.is_finite() && self.max_requests_per_second > 0.0) {
            return bad("max_requests_per_second must be positive");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive");
        }
        if !(self.backoff_base.is_finite() && self.backoff_base > 0.0) {
            return bad("backoff_base must be positive");
        }
        if self.max_concurrent_fetchers == 0 {
            return bad("max_concurrent_fetchers must be positive");
        }
        if !(self.search_radius_deg.is_finite() && self.search_radius_deg > 0.0) {
            return bad("search_radius_deg must be positive");
        }
        Ok(())
    }
}

enum CallError {
    /// Retries used up; skip this unit of work.
    Exhausted(String),
    /// Run-level failure; stop everything.
    Fatal,
}

#[derive(Default)]
struct Counters {
    posts_fetched: AtomicU64,
    images_fetched: AtomicU64,
    errors: AtomicU64,
}

struct Fetcher<'a> {
    provider: &'a dyn PostProvider,
    limits: &'a ScrapeLimits,
    limiter: RateLimiter,
    abort: AtomicBool,
    abort_reason: Mutex<Option<String>>,
    counters: Counters,
}

impl<'a> Fetcher<'a> {
    fn new(provider: &'a dyn PostProvider, limits: &'a ScrapeLimits) -> Self {
        Self {
            provider,
            limits,
            limiter: RateLimiter::new(limits.max_requests_per_second),
            abort: AtomicBool::new(false),
            abort_reason: Mutex::new(None),
            counters: Counters::default(),
        }
    }

    fn aborted(&self) -> bool {
        self.abort.load(Ordering::SeqCst)
    }

    fn abort(&self, reason: String) {
        let mut slot = self.abort_reason.lock().unwrap_or_else(|e| e.into_inner());
        slot.get_or_insert(reason);
        self.abort.store(true, Ordering::SeqCst);
    }

    fn backoff(&self, context: &str, attempt: u32) -> Duration {
        let digest = Sha256::digest(format!("{context}:{attempt}").as_bytes());
        let u = u32::from_le_bytes(digest[..4].try_into().unwrap()) as f64 / u32::MAX as f64;
        let jitter = 0.8 + 0.4 * u;
        Duration::from_secs_f64(self.limits.backoff_base * 2f64.powi(attempt as i32) * jitter)
    }

    fn call<T>(&self, context: &str, f: impl Fn(&dyn PostProvider) -> Result<T, ProviderError>) -> Result<T, CallError> {
        let mut last = String::new();
        for attempt in 0..=self.limits.max_retries {
            if self.aborted() {
                return Err(CallError::Fatal);
            }
            if attempt > 0 {
                thread::sleep(self.backoff(context, attempt - 1));
            }
            self.limiter.acquire();
            match f(self.provider) {
                Ok(v) => return Ok(v),
                Err(ProviderError::Transient(m)) => {
                    log::debug!("{context}: attempt {attempt} failed: {m}");
                    last = m;
                }
                Err(ProviderError::Fatal(m)) => {
                    self.abort(m.clone());
                    return Err(CallError::Fatal);
                }
            }
        }
        Err(CallError::Exhausted(last))
    }

    fn all_pages<T>(
        &self,
        context: &str,
        fetch: impl Fn(&dyn PostProvider, Option<&str>) -> Result<Page<T>, ProviderError>,
    ) -> Result<Vec<T>, CallError> {
        let mut items = Vec::new();
        let mut cursor: Option<String> = None;
        loop {
            let page = self.call(context, |p| fetch(p, cursor.as_deref()))?;
            items.extend(page.items);
            match page.next_cursor.filter(|c| !c.is_empty()) {
                Some(c) => cursor = Some(c),
                None => return Ok(items),
            }
        }
    }

    fn fetch_media(&self, post: &mut PostRecord, sink: &MediaSink) -> Result<(), Halt> {
        for media in &mut post.image_refs {
            if media.is_fetched() {
                continue;
            }
            let url = media.url.clone();
            match self.call(&url, |p| p.fetch_media(&url)) {
                Ok(bytes) => {
                    let (hash, path) = sink.write(&bytes).map_err(Halt::Failed)?;
                    media.content_hash = Some(hash);
                    media.local_path = Some(path);
                    self.counters.images_fetched.fetch_add(1, Ordering::Relaxed);
                }
                Err(CallError::Exhausted(m)) => {
                    log::warn!("media {url} not fetched: {m}");
                    self.counters.errors.fetch_add(1, Ordering::Relaxed);
                }
                Err(CallError::Fatal) => return Err(Halt::Stop),
            }
        }
        Ok(())
    }
}

enum Halt {
    Failed(CorpusError),
    Stop,
}

/// Outcome of one unit, sent to the writer. Units are applied in index order
/// so the record log does not depend on thread timing.
enum Message {
    Unit {
        index: usize,
        posts: Vec<PostRecord>,
        done: Option<String>,
    },
    Failed(CorpusError),
}

/// Runs `f` over `items` on up to `workers` threads; results keep input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

/// A unit of harvesting work: one location or one keyword.
struct Unit {
    id: String,
    tag: Option<String>,
}

fn apply_unit(
    store: &mut CorpusStore,
    kind: ProgressKind,
    posts: Vec<PostRecord>,
    done: Option<String>,
    known: &Mutex<HashSet<String>>,
    stats: &mut ScrapeStats,
) -> Result<(), CorpusError> {
    for post in posts {
        let key = post.primary_key.clone();
        if store.contains(&key) {
            stats.posts_deduped += 1;
            store.add_tags(&key, &post.tags)?;
        } else {
            store.ingest_post(post)?;
            known.lock().unwrap().insert(key);
        }
    }
    match done {
        Some(id) => store.mark_done(kind, &id),
        None => Ok(()),
    }
}

fn harvest(
    units: Vec<Unit>,
    kind: ProgressKind,
    fetcher: &Fetcher<'_>,
    store: &mut CorpusStore,
    stats: &mut ScrapeStats,
) -> Result<(), ScrapeError> {
    let done = store.completed(kind)?;
    let units: Vec<Unit> = units.into_iter().filter(|u| !done.contains(&u.id)).collect();
    let known = Mutex::new(store.keys());
    let sink = store.media_sink();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Message>();
    let mut store_error = None;

    thread::scope(|s| {
        for _ in 0..fetcher.limits.max_concurrent_fetchers.clamp(1, units.len().max(1)) {
            let tx = tx.clone();
            let (units, next, known, sink) = (&units, &next, &known, &sink);
            s.spawn(move || {
                while !fetcher.aborted() {
                    let index = next.fetch_add(1, Ordering::SeqCst);
                    let Some(unit) = units.get(index) else { break };
                    let posts = match kind {
                        ProgressKind::Location => {
                            fetcher.all_pages(&unit.id, |p, c| p.fetch_posts_by_location(&unit.id, c))
                        }
                        ProgressKind::Keyword => {
                            fetcher.all_pages(&unit.id, |p, c| p.search_posts_by_keyword(&unit.id, c))
                        }
                    };
                    let mut posts = match posts {
                        Ok(posts) => posts,
                        Err(CallError::Exhausted(m)) => {
                            log::warn!("skipping {}: {m}", unit.id);
                            fetcher.counters.errors.fetch_add(1, Ordering::Relaxed);
                            let skipped = Message::Unit {
                                index,
                                posts: Vec::new(),
                                done: None,
                            };
                            if tx.send(skipped).is_err() {
                                return;
                            }
                            continue;
                        }
                        Err(CallError::Fatal) => break,
                    };
                    for post in &mut posts {
                        fetcher.counters.posts_fetched.fetch_add(1, Ordering::Relaxed);
                        post.tags.clear();
                        post.tags.extend(unit.tag.iter().cloned());
                        let is_new = !known.lock().unwrap().contains(&post.primary_key);
                        if is_new {
                            match fetcher.fetch_media(post, sink) {
                                Ok(()) => {}
                                Err(Halt::Failed(e)) => {
                                    let _ = tx.send(Message::Failed(e));
                                    return;
                                }
                                Err(Halt::Stop) => return,
                            }
                        }
                    }
                    let finished = Message::Unit {
                        index,
                        posts,
                        done: Some(unit.id.clone()),
                    };
                    if tx.send(finished).is_err() {
                        return;
                    }
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut next_index = 0;
        for msg in rx {
            if store_error.is_some() {
                continue;
            }
            match msg {
                Message::Unit { index, posts, done } => {
                    pending.insert(index, (posts, done));
                }
                Message::Failed(e) => {
                    fetcher.abort(e.to_string());
                    store_error = Some(e);
                    continue;
                }
            }
            while let Some((posts, done)) = pending.remove(&next_index) {
                next_index += 1;
                if let Err(e) = apply_unit(store, kind, posts, done, &known, stats) {
                    fetcher.abort(e.to_string());
                    store_error = Some(e);
                    break;
                }
            }
        }
    });

    stats.posts_fetched += fetcher.counters.posts_fetched.load(Ordering::Relaxed);
    stats.images_fetched += fetcher.counters.images_fetched.load(Ordering::Relaxed);
    stats.errors = fetcher.counters.errors.load(Ordering::Relaxed);
    if let Some(e) = store_error {
        return Err(e.into());
    }
    if fetcher.aborted() {
        let reason = fetcher
            .abort_reason
            .lock()
            .unwrap()
            .clone()
            .unwrap_or_else(|| "aborted".into());
        return Err(ScrapeError::Aborted {
            reason,
            stats: stats.clone(),
        });
    }
    store.sync()?;
    store.clear_progress(kind)?;
    Ok(())
}

/// Discovers locations around every grid point, then harvests each
/// location's posts and media into `store`.
pub fn scrape_by_location(
    spec: &GridSpec,
    provider: &dyn PostProvider,
    store: &mut CorpusStore,
    limits: &ScrapeLimits,
) -> Result<ScrapeStats, ScrapeError> {
    limits.validate()?;
    let points = enumerate_grid(spec).map_err(|e| ScrapeError::Invalid(e.to_string()))?;
    let started = Instant::now();
    let fetcher = Fetcher::new(provider, limits);
    let mut stats = ScrapeStats::default();

    let radius = limits.search_radius_deg;
    let found = parallel_map(&points, limits.max_concurrent_fetchers, |pt: &GridPoint| {
        let context = format!("search {:.6},{:.6}", pt.lat, pt.lon);
        fetcher.all_pages(&context, |p, c| p.search_locations_near(*pt, radius, c))
    });
    let mut seen = HashSet::new();
    let mut units = Vec::new();
    for result in found {
        match result {
            Ok(locations) => {
                for loc in locations {
                    if loc.location_id.is_empty() {
                        continue;
                    }
                    if seen.insert(loc.location_id.clone()) {
                        units.push(Unit {
                            id: loc.location_id,
                            tag: None,
                        });
                    }
                }
            }
            Err(CallError::Exhausted(m)) => {
                log::warn!("location search failed: {m}");
                fetcher.counters.errors.fetch_add(1, Ordering::Relaxed);
            }
            Err(CallError::Fatal) => {}
        }
    }
    stats.locations_found = units.len() as u64;

    let result = if fetcher.aborted() {
        Err(ScrapeError::Aborted {
            reason: fetcher.abort_reason.lock().unwrap().clone().unwrap_or_default(),
            stats: stats.clone(),
        })
    } else {
        harvest(units, ProgressKind::Location, &fetcher, store, &mut stats)
    };
    stats.wall_time = started.elapsed().as_secs_f64();
    result.map(|()| stats)
}

/// Pages through keyword search results for each keyword, tagging every
/// stored post with the keywords that returned it.
pub fn scrape_by_keywords(
    keywords: &[String],
    provider: &dyn PostProvider,
    store: &mut CorpusStore,
    limits: &ScrapeLimits,
) -> Result<ScrapeStats, ScrapeError> {
    if keywords.is_empty() {
        return Err(ScrapeError::Invalid("keyword list is empty".into()));
    }
    limits.validate()?;
    let list = KeywordList::from_names(keywords).map_err(|e| ScrapeError::Invalid(e.to_string()))?;
    let started = Instant::now();
    let fetcher = Fetcher::new(provider, limits);
    let mut stats = ScrapeStats::default();
    let units = list
        .names()
        .map(|n| Unit {
            id: n.to_string(),
            tag: Some(n.to_string()),
        })
        .collect();
    let result = harvest(units, ProgressKind::Keyword, &fetcher, store, &mut stats);
    stats.wall_time = started.elapsed().as_secs_f64();
    result.map(|()| stats)
}
