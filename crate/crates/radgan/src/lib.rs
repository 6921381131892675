//! Filesystem side of the reconstruction pipeline: WAV IO, TOML run
//! configuration, checkpoint files, on-disk corpora, metric logs, figures
//! and the `radgan` command-line tool.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
mod error;
pub mod jsonl;
pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod providers;
pub mod wav;

pub use error::{Error, Result};
pub use radgan_core as core;
