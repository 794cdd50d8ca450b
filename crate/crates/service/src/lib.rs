//! HTTP API and command-line front end for the summarization pipeline.

pub mod api;
pub mod cli;
