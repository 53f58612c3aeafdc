//! Data curation and expert routing over an embedded instruction corpus.
//!
//! The corpus is clustered into expert groups with k-means; each group is
//! rebalanced in two stages (adaptive density sampling, then model-feedback
//! MMR supplementation); each expert is represented by the centroid of its
//! curated data and queries are routed to the nearest centroid.

pub mod client;
pub mod cluster;
pub mod corpus;
pub mod density;
pub mod error;
pub mod pipeline;
pub mod router;
pub mod scoring;
pub mod select;

pub use error::{Error, Result};
