//! Benchmark driver: per-cell pipeline, grid runner, report tables and
//! acceptance checks on top of `mct_core`.

pub mod cell;
pub mod config;
pub mod grid;
pub mod records;
pub mod report;
pub mod validate;
