use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid cine: {0}")]
    InvalidCine(String),

    #[error("invalid keyframes: {0}")]
    InvalidKeyframes(String),

    #[error("frame index {t} outside labeled interval [{lo}, {hi}]")]
    PhaseDomain { t: usize, lo: usize, hi: usize },

    #[error("degenerate keyframe interval: {0}")]
    DegenerateInterval(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("training aborted at iteration {iteration}: {reason}")]
    TrainingAborted { iteration: usize, reason: String },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed json in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "missing_file",
            Error::Json { .. } => "malformed_json",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Shape(_) => "shape_mismatch",
            Error::InvalidCine(_)
            | Error::InvalidKeyframes(_)
            | Error::Format(_)
            | Error::NonFinite(_) => "invalid_input",
            Error::PhaseDomain { .. } | Error::DegenerateInterval(_) => "invalid_keyframes",
            Error::Empty(_) => "empty_input",
            Error::Undefined(_) => "undefined_metric",
            Error::TrainingAborted { .. } => "training_aborted",
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => "missing_file",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code: 3 missing file, 4 config or shape mismatch,
    /// 5 malformed JSON, 6 invalid input data, 7 training aborted, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "missing_file" => 3,
            "invalid_config" | "shape_mismatch" => 4,
            "malformed_json" => 5,
            "invalid_input" | "invalid_keyframes" | "empty_input" => 6,
            "training_aborted" => 7,
            _ => 1,
        }
    }
}
