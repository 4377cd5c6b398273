//! Config loading, stage manifests and the stage runner behind the
//! `stylepipe` binary.

pub mod config;
pub mod manifest;
pub mod stages;

pub use config::{LoadedConfig, RunConfig};
pub use stages::{Pipeline, Stage, StageStatus};
