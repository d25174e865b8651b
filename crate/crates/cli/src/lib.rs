//! Driver library for the `laest` binary: run configuration, file
//! formats (manifests, vocabulary listings, checkpoints, loss logs),
//! report rendering, and the five subcommands (`gen`, `train`, `eval`,
//! `translate`, `ablate`).
//!
//! The binary in `main.rs` is a thin argument-parsing wrapper; all
//! behavior lives here so integration tests exercise exactly what the
//! binary runs.

pub mod commands;
pub mod config;
pub mod io;
pub mod report;
