//! Library surface of the experiment runner: configuration, report types and
//! the per-theorem pipelines, kept callable from integration tests.

pub mod config;
pub mod pipelines;
pub mod report;

pub use config::ExperimentConfig;
pub use report::{CheckRecord, RunReport};
