use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{0}")]
    Busy(String),

    #[error(transparent)]
    Core(#[from] protocomp::Error),
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 0 success, 1 other failure, 2 configuration, 3 data, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        use protocomp::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Busy(_) => 1,
            CliError::Core(e) => match e {
                E::Config { .. } | E::CheckpointMismatch { .. } => 2,
                E::Data(_)
                | E::Parse { .. }
                | E::InvalidCloud(_)
                | E::DegenerateCloud
                | E::SampleTooLarge { .. }
                | E::Checkpoint(_)
                | E::Json(_) => 3,
                E::NumericalAbort(_) | E::NonFinite { .. } => 4,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
                _ => 1,
            },
        }
    }
}
