use advlab_core::{DataError, TensorError, TrainError};

/// Command failures, bucketed by exit code: 2 config/input, 3 numerical,
/// 4 I/O.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidPlan(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<advlab_core::MetricError> for CliError {
    fn from(e: advlab_core::MetricError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<advlab_core::AttackError> for CliError {
    fn from(e: advlab_core::AttackError) -> Self {
        CliError::Config(e.to_string())
    }
}

pub fn io_err(context: &str, path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{context} {}: {e}", path.display()))
}
