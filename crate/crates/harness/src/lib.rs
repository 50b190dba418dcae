//! Experiment orchestration behind the `tubeshift` command.

pub mod ablation;
pub mod config;
pub mod manifest;
pub mod run;

pub use ablation::{run_grid, AblationRow, AblationTable, CellResult};
pub use config::RunConfig;
pub use manifest::RunManifest;
