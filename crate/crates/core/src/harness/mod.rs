//! Experiment plumbing: metrics, run configuration, presets, traces, plots.

pub mod config;
pub mod metrics;
pub mod presets;
pub mod scenario;
pub mod svg;
pub mod trace;
