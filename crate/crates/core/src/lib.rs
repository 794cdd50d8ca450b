//! Aspect-guided summarization of product reviews.
//!
//! The pipeline has four stages, each in its own module:
//!
//! 1. [`extraction`]: up to five (aspect, sentiment) pairs per review.
//! 2. [`consolidation`]: rare aspects mapped to canonical forms, with a
//!    persistent mapping cache.
//! 3. [`selection`]: top aspects per product and weighted sampling of
//!    supporting reviews under a cap.
//! 4. [`summarization`]: a length-checked summary from an aspect-guided prompt.
//!
//! [`orchestrator`] drives the stages per product and decides when summaries
//! are created or refreshed. [`dataset`] and [`eval`] cover the released
//! table formats, corpus statistics and the human-evaluation taxonomy.

pub mod config;
pub mod consolidation;
pub mod dataset;
pub mod eval;
pub mod exec;
pub mod extraction;
pub mod gateway;
pub mod model;
pub mod orchestrator;
pub mod selection;
pub mod store;
pub mod summarization;

pub use exec::{Clock, Execution, FixedClock, SystemClock};
pub use model::*;
