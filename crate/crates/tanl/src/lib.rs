//! File formats, configuration and the command-line front end for
//! `tanl-core`.

pub mod ablate;
pub mod analyze;
pub mod cli;
pub mod config;
pub mod format;
pub mod records;
