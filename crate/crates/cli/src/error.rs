use std::path::{Path, PathBuf};

use memmcl_core::checkpoint::CheckpointError;
use memmcl_core::curriculum::CurriculumError;
use memmcl_core::evolution::EvolutionError;
use memmcl_core::merge::MergeError;
use memmcl_core::metrics::MetricError;
use memmcl_core::tasks::{DataIoError, TaskError};
use memmcl_core::toymodel::ModelError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("missing input {0}; run the earlier pipeline stage first")]
    MissingInput(PathBuf),
    #[error("{task}: inference failed: {message}")]
    Inference { task: String, message: String },
    #[error("{task}: {source}")]
    Task { task: String, source: Box<CliError> },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataIoError),
    #[error(transparent)]
    Registry(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Curriculum(#[from] CurriculumError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn for_task(task: &str, err: impl Into<CliError>) -> Self {
        CliError::Task {
            task: task.to_string(),
            source: Box::new(err.into()),
        }
    }

    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Task { source, .. } => source.exit_code(),
            CliError::Model(e) => model_code(e),
            CliError::Checkpoint(CheckpointError::NonFinite { .. }) => EXIT_NUMERIC,
            CliError::Merge(MergeError::Checkpoint(CheckpointError::NonFinite { .. })) => EXIT_NUMERIC,
            CliError::Evolution(EvolutionError::Model(e)) => model_code(e),
            _ => EXIT_DATA,
        }
    }
}

fn model_code(e: &ModelError) -> i32 {
    match e {
        ModelError::Diverged { .. } | ModelError::InvalidDistribution(_) => EXIT_NUMERIC,
        ModelError::Checkpoint(CheckpointError::NonFinite { .. }) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::MissingInput("a".into()).exit_code(), 2);
        let diverged = CliError::for_task(
            "SC-3class",
            ModelError::Diverged {
                epoch: 2,
                loss: f64::NAN,
            },
        );
        assert_eq!(diverged.exit_code(), 3);
        assert!(diverged.to_string().starts_with("SC-3class: "));
        assert_eq!(CliError::Model(ModelError::EmptyTrainingSet).exit_code(), 2);
    }
}
