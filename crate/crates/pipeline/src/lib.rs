//! Experiment orchestration: configuration, stage runs recorded in an
//! append-only manifest, reports and figure grids.

pub mod config;
pub mod error;
pub mod figure;
pub mod manifest;
pub mod stage;

pub use config::ExperimentConfig;
pub use error::{PipelineError, Result};
pub use figure::{emit_figure_grid, figure_grid};
pub use manifest::{ExperimentManifest, StageRecord};
pub use stage::{artifact_root, stage_seed, Experiment, Stage};

/// Environment variable naming the artifact root directory.
pub const ARTIFACT_ROOT_ENV: &str = "SYNTH_ARTIFACT_ROOT";

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
