//! Harvesting, dataset construction, late-fusion classification and trend
//! reporting for geotagged food photos.

pub mod cli;
pub mod corpus;
pub mod evalkit;
pub mod fusion;
pub mod geogrid;
pub mod scrape;
pub mod seed;
pub mod text;
pub mod trends;
