//! Command-line front end for `lrf-core`: configuration, the checkpoint
//! container, run reports and the `lrf` subcommands.

use std::path::{Path, PathBuf};

use lrf_core::compression::CompressionError;
use lrf_core::model::ModelError;
use lrf_core::search::SearchError;
use lrf_core::trajectory::PipelineError;
use thiserror::Error;

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("output directory {0} is in use (lock file present)")]
    Locked(PathBuf),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for numeric or search failures, 2 for invalid input.
    pub fn exit_code(&self) -> i32 {
        fn search(e: &SearchError) -> i32 {
            match e {
                SearchError::InvalidEnergyRange { .. } | SearchError::InvalidConfig(_) => 2,
                SearchError::Compression(_) => 2,
                SearchError::Model(m) => model(m),
                _ => 1,
            }
        }
        fn model(e: &ModelError) -> i32 {
            match e {
                ModelError::Invalid(_) | ModelError::InvalidConfig(_) | ModelError::Compression(_) => 2,
                _ => 1,
            }
        }
        match self {
            CliError::Pipeline(p) => match p {
                PipelineError::InvalidTrajectory(_)
                | PipelineError::InvalidConfig(_)
                | PipelineError::Compression(_) => 2,
                PipelineError::Search { source, .. } => search(source),
                PipelineError::Model(m) => model(m),
            },
            CliError::Search(s) => search(s),
            CliError::Model(m) => model(m),
            _ => 2,
        }
    }
}
