use std::path::PathBuf;

use thiserror::Error;

use crate::stage::Stage;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("validation error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("dependency error: stage `{stage}` requires `{missing}`, which has not been run")]
    Dependency { stage: Stage, missing: Stage },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] synth_core::Error),
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for invalid input, 3 for a missing prerequisite stage, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        use synth_core::Error as E;
        match self {
            PipelineError::Dependency { .. } => 3,
            PipelineError::Io { .. } | PipelineError::Manifest(_) => 4,
            PipelineError::Core(E::Io { .. } | E::Format { .. }) => 4,
            PipelineError::Config { .. } | PipelineError::Core(_) => 2,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
