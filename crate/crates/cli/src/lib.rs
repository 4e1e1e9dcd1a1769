//! Stage orchestration for the `maect` binary: configuration, run
//! directories, provenance manifests and reports.

pub mod config;
pub mod manifest;
pub mod report;
pub mod run;

pub use config::RunConfig;
pub use run::{run, Command, Outcome, RunArgs};
