//! JSON-over-HTTP provider configured from the environment.
//!
//! Endpoints, relative to `FOODTREND_PROVIDER_URL`:
//!
//! ```text
//! GET /locations/search?lat=..&lon=..&radius=..[&cursor=..]  -> Page<LocationRecord>
//! GET /locations/{id}/posts[?cursor=..]                       -> Page<PostRecord>
//! GET /posts/search?keyword=..[&cursor=..]                    -> Page<PostRecord>
//! ```
//!
//! Media URLs are fetched as given. When `FOODTREND_PROVIDER_TOKEN` is set it
//! is sent as a bearer token on every request.

use std::time::Duration;

use serde::de::DeserializeOwned;

use super::provider::{PostProvider, ProviderError};
use super::types::{LocationRecord, Page, PostRecord};
use crate::geogrid::GridPoint;

pub const ENDPOINT_VAR: &str = "FOODTREND_PROVIDER_URL";
pub const TOKEN_VAR: &str = "FOODTREND_PROVIDER_TOKEN";

pub struct HttpProvider {
    base: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider").field("base", &self.base).finish()
    }
}

impl HttpProvider {
    pub fn new(base: impl Into<String>, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            token,
            agent,
        }
    }

    pub fn from_env() -> Result<Self, String> {
        let base = std::env::var(ENDPOINT_VAR).map_err(|_| format!("{ENDPOINT_VAR} is not set"))?;
        let token = std::env::var(TOKEN_VAR).ok().filter(|t| !t.is_empty());
        Ok(Self::new(base, token))
    }

    fn get(&self, url: &str, query: &[(&str, String)]) -> Result<ureq::http::Response<ureq::Body>, ProviderError> {
        let mut req = self.agent.get(url);
        for (k, v) in query {
            req = req.query(*k, v);
        }
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let resp = req.call().map_err(|e| ProviderError::Transient(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => Ok(resp),
            401 | 403 => Err(ProviderError::Fatal(format!("{url}: HTTP {status}"))),
            _ => Err(ProviderError::Transient(format!("{url}: HTTP {status}"))),
        }
    }

    fn get_page<T: DeserializeOwned>(&self, path: &str, mut query: Vec<(&str, String)>, cursor: Option<&str>) -> Result<Page<T>, ProviderError> {
        if let Some(c) = cursor {
            query.push(("cursor", c.to_string()));
        }
        let url = format!("{}{}", self.base, path);
        let mut resp = self.get(&url, &query)?;
        resp.body_mut()
            .read_json::<Page<T>>()
            .map_err(|e| ProviderError::Transient(format!("{url}: bad response body: {e}")))
    }
}

// Minimal percent-encoding for a path segment.
fn encode_segment(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b'~') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

impl PostProvider for HttpProvider {
    fn search_locations_near(
        &self,
        point: GridPoint,
        radius_deg: f64,
        cursor: Option<&str>,
    ) -> Result<Page<LocationRecord>, ProviderError> {
        let query = vec![
            ("lat", format!("{:.6}", point.lat)),
            ("lon", format!("{:.6}", point.lon)),
            ("radius", format!("{radius_deg}")),
        ];
        self.get_page("/locations/search", query, cursor)
    }

    fn fetch_posts_by_location(&self, location_id: &str, cursor: Option<&str>) -> Result<Page<PostRecord>, ProviderError> {
        let path = format!("/locations/{}/posts", encode_segment(location_id));
        self.get_page(&path, Vec::new(), cursor)
    }

    fn search_posts_by_keyword(&self, keyword: &str, cursor: Option<&str>) -> Result<Page<PostRecord>, ProviderError> {
        self.get_page("/posts/search", vec![("keyword", keyword.to_string())], cursor)
    }

    fn fetch_media(&self, url: &str) -> Result<Vec<u8>, ProviderError> {
        let mut resp = self.get(url, &[])?;
        resp.body_mut()
            .read_to_vec()
            .map_err(|e| ProviderError::Transient(format!("{url}: {e}")))
    }
}
