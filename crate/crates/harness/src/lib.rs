//! Batch tooling around `dmm-core`: seeded synthetic RGB/IR pairs, the
//! gradient-check registry, the scan-scaling benchmark, a toy end-to-end
//! overfit run and attention-contrast reports.

pub mod bench;
pub mod config;
pub mod fixture;
pub mod report;
pub mod suite;
pub mod synth;
pub mod train;
