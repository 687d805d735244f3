//! File formats, run configuration and the `ldva` command line on top of
//! [`ldva_core`].
//!
//! Images are read and written as IDX, configs and metrics as JSON, tabular
//! dumps as CSV. Checkpoints use a small versioned binary format, see
//! [`checkpoint`].

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod formats;
pub mod idx;
pub mod run;
pub mod tasks;

pub use error::{Error, Result};
pub use ldva_core as core;
