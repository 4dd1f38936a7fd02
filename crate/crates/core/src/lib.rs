//! Curation of preference-tuning data with heterogeneous supervision, and
//! bias metrics over model probe dumps.
//!
//! The data path is `ingest` → `unify` → `embed` → `cluster` → `select`;
//! [`pipeline`] runs it end to end from a [`config::RunConfig`].
//! [`evalharness`] scores probe dumps independently of the data path.

pub mod cluster;
pub mod config;
pub mod embed;
pub mod error;
pub mod evalharness;
pub mod ingest;
mod jsonl;
pub mod manifest;
pub mod pipeline;
pub mod select;
pub mod unify;

pub use error::{Error, Result};
pub use jsonl::{read_jsonl, write_jsonl};
