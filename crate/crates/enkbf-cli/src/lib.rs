//! Experiment harness for the l-EnKBF: config parsing, error metrics,
//! and the three reproducible scaling sweeps behind the `enkbf` binary.

pub mod config;
pub mod metrics;
pub mod sweep;
