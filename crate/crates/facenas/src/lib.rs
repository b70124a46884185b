//! File formats, run directories, parallel trial execution and the
//! command-line front end around `facenas_core`.

pub mod ablation;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod presets;
pub mod report;
pub mod run;

pub use config::RunConfig;
pub use pipeline::{SearchOptions, Session, UsageError};
