use thiserror::Error;

use super::types::{LocationRecord, Page, PostRecord};
use crate::geogrid::GridPoint;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProviderError {
    /// Worth retrying after a backoff.
    #[error("transient provider error: {0}")]
    Transient(String),
    /// The run cannot continue (bad credentials, provider shut down).
    #[error("fatal provider error: {0}")]
    Fatal(String),
}

/// A source of posts. Pagination must terminate, and a given cursor must
/// return the same page for the duration of a run.
pub trait PostProvider: Send + Sync {
    fn search_locations_near(
        &self,
        point: GridPoint,
        radius_deg: f64,
        cursor: Option<&str>,
    ) -> Result<Page<LocationRecord>, ProviderError>;

    fn fetch_posts_by_location(&self, location_id: &str, cursor: Option<&str>) -> Result<Page<PostRecord>, ProviderError>;

    fn search_posts_by_keyword(&self, keyword: &str, cursor: Option<&str>) -> Result<Page<PostRecord>, ProviderError>;

    /// Raw bytes behind a media URL.
    fn fetch_media(&self, url: &str) -> Result<Vec<u8>, ProviderError>;
}

impl<P: PostProvider + ?Sized> PostProvider for &P {
    fn search_locations_near(
        &self,
        point: GridPoint,
        radius_deg: f64,
        cursor: Option<&str>,
    ) -> Result<Page<LocationRecord>, ProviderError> {
        (**self).search_locations_near(point, radius_deg, cursor)
    }

    fn fetch_posts_by_location(&self, location_id: &str, cursor: Option<&str>) -> Result<Page<PostRecord>, ProviderError> {
        (**self).fetch_posts_by_location(location_id, cursor)
    }

    fn search_posts_by_keyword(&self, keyword: &str, cursor: Option<&str>) -> Result<Page<PostRecord>, ProviderError> {
        (**self).search_posts_by_keyword(keyword, cursor)
    }

    fn fetch_media(&self, url: &str) -> Result<Vec<u8>, ProviderError> {
        (**self).fetch_media(url)
    }
}
