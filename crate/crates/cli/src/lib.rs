//! Training, evaluation, generation and diagnostics on top of `stp-core`.

pub mod checkpoint;
pub mod config;
pub mod diag;
pub mod eval;
pub mod train;
