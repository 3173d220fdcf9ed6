use thiserror::Error;

/// Failures grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(#[source] mnat::Error),

    #[error("data error: {0}")]
    DataMessage(String),

    #[error("training failed: {0}")]
    Training(#[source] mnat::Error),

    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) | CliError::DataMessage(_) | CliError::Output { .. } => 2,
            CliError::Training(_) => 3,
        }
    }
}
