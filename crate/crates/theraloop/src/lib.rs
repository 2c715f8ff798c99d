//! File formats, configuration, the HTTP backend and the CLI around
//! `theraloop-core`.

pub mod app;
pub mod config;
pub mod files;
pub mod http;
pub mod kb;
pub mod runner;

pub use theraloop_core as core;
