//! Experiment plumbing: configuration files, evaluation, multi-seed runs,
//! sweeps and output files.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod report;
pub mod selftest;
