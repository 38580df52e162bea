use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PulseError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PulseError {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sample {path} has no parseable instructions")]
    EmptySample { path: PathBuf },

    #[error("data error: {0}")]
    Data(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("stage `{stage}` failed (input {input_hash}): {source}")]
    Stage {
        stage: String,
        input_hash: String,
        #[source]
        source: Box<PulseError>,
    },
}

impl PulseError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PulseError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 contract violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            PulseError::Config(_) => 2,
            PulseError::Io { .. }
            | PulseError::EmptySample { .. }
            | PulseError::Data(_)
            | PulseError::InsufficientData(_) => 3,
            PulseError::Contract(_) => 4,
            PulseError::Stage { source, .. } => source.exit_code(),
        }
    }
}

impl From<serde_json::Error> for PulseError {
    fn from(e: serde_json::Error) -> Self {
        PulseError::Data(format!("json: {e}"))
    }
}
