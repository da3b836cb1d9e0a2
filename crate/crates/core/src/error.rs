use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("token row {row} has zero norm")]
    ZeroNormToken { row: usize },

    #[error("invalid token matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid embedding store: {0}")]
    InvalidStore(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("rank window [{q1}, {q2}] out of range for {others} candidates")]
    WindowOutOfRange { q1: usize, q2: usize, others: usize },

    #[error("no unused target left in window for reference {ref_id}")]
    WindowExhausted { ref_id: String },

    #[error("template {name}: {reason}")]
    Template { name: String, reason: String },

    #[error("agent unavailable after {attempts} attempt(s): {reason}")]
    AgentUnavailable { attempts: u32, reason: String },

    #[error("agent returned an empty response")]
    EmptyResponse,

    #[error("reference {ref_id}: {source}")]
    Curation {
        ref_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("argmax tie at query {query}, target {target}, token {token}")]
    TieDetected { query: usize, target: usize, token: usize },

    #[error("assignment for item {item} is not bijective")]
    NonBijectiveSigma { item: usize },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("annotation has no subset ids for query {query_id}")]
    MissingSubset { query_id: String },

    #[error("no ranking for query {query_id}")]
    MissingQuery { query_id: String },

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Strips any per-reference annotation added during curation.
    pub fn root(&self) -> &Error {
        match self {
            Error::Curation { source, .. } => source.root(),
            other => other,
        }
    }

    /// Short stable name of the variant, used in machine-readable CLI output.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::ZeroNormToken { .. } => "ZeroNormToken",
            Error::InvalidMatrix(_) => "InvalidMatrix",
            Error::InvalidStore(_) => "InvalidStore",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::Format { .. } => "FormatError",
            Error::Io { .. } => "IoError",
            Error::WindowOutOfRange { .. } => "WindowOutOfRange",
            Error::WindowExhausted { .. } => "WindowExhausted",
            Error::Template { .. } => "TemplateError",
            Error::AgentUnavailable { .. } => "AgentUnavailable",
            Error::EmptyResponse => "EmptyResponse",
            Error::Curation { .. } => unreachable!(),
            Error::TieDetected { .. } => "TieDetected",
            Error::NonBijectiveSigma { .. } => "NonBijectiveSigma",
            Error::InvalidBatch(_) => "InvalidBatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::MissingSubset { .. } => "MissingSubset",
            Error::MissingQuery { .. } => "MissingQuery",
            Error::InvalidAnnotation(_) => "InvalidAnnotation",
            Error::ChecksumMismatch(_) => "ChecksumMismatch",
        }
    }
}
