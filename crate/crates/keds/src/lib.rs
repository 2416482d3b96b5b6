//! File formats, run configuration and pipeline stages for `keds-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod index_file;
pub mod jsonl;
pub mod kedb;
pub mod pipeline;

pub use config::{Overrides, RunConfig};
pub use error::{Error, FormatError, Result};
