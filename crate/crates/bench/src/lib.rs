//! Supervised-to-bandit benchmark harness: experiment configuration, the
//! per-seed pipeline, result files and significance tests.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiment;
pub mod params;
pub mod report;
pub mod stats;
