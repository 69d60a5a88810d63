use std::path::PathBuf;

/// Errors across the whole pipeline, grouped by failure class so callers
/// (notably the CLI) can map them to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/operation shape violation. `detail` names the offending shapes.
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration (schedules, divisibility, flag combinations).
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an operation contract (e.g. non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A feature was requested that the loaded model/config does not provide.
    #[error("capability error: {0}")]
    Capability(String),

    /// Malformed file content; `offset` is the byte position of the failure.
    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },

    /// WAV ingestion hit a codec/layout we do not read.
    #[error("unsupported wav input: {0}")]
    UnsupportedWav(String),

    /// Grad-CAM layer selector did not match the catalogue.
    #[error("unknown layer {given:?}; valid selectors: {}", valid.join(", "))]
    UnknownLayer { given: String, valid: Vec<String> },

    /// Optimizer rejected a step because a gradient went non-finite.
    #[error("non-finite gradient for parameter {param:?} (batch {batch})")]
    NonFiniteGradient { param: String, batch: u64 },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by the environment (files, disks) rather than
    /// by invalid inputs or configuration.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Parse { .. } | Error::UnsupportedWav(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
