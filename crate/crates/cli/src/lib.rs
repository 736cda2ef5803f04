//! Library behind the `trq` command-line tool: run configuration, the
//! build/gt/calibrate/bench pipeline, and report files.

pub mod config;
pub mod report;
pub mod run;

pub use config::RunConfig;
