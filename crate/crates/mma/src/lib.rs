//! Storage, reporting and command-line layer for the `mma-core` adapters.
//!
//! - [`format`]: the MMEB-v1 embedding store directory format.
//! - [`checkpoint`]: adapter parameter checkpoints.
//! - [`reports`]: CSV, JSONL and aligned-text outputs.
//! - [`config`] and [`cli`]: flag and config-file handling and the `mma` binary's commands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod format;
pub mod reports;

pub use error::CliError;
