//! bidpipe: a CPC-targeting bid recommendation pipeline.
//!
//! Impression and click logs go in; per-feature-combination bid CPMs come
//! out. Click rates are smoothed with Beta-Binomial pseudo-counts derived
//! from population averages, bids are set so the expected cost per click
//! stays under a target, and a bundled market simulator replays weekly
//! iterations to exercise the feedback behavior.

pub mod aggregate;
pub mod bidder;
pub mod config;
pub mod domain;
pub mod error;
pub mod ingest;
pub mod pipeline;
pub mod recommend;
pub mod simulate;

pub use error::PipelineError;
