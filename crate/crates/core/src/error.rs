use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing mandatory column `{0}`")]
    MissingColumn(String),

    #[error("duplicate subject ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),

    #[error("unrecognised label `{value}` for subject {subject}")]
    UnknownLabel { subject: String, value: String },

    #[error("demographic field `{0}` is missing for every subject")]
    AllMissing(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-numeric cell `{cell}` at row {row}, column {column}")]
    NonNumeric { row: usize, column: usize, cell: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value during {stage} at iteration {iteration}")]
    NonFinite { stage: String, iteration: usize },

    #[error("fold {fold}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("ensemble member {member}")]
    Member {
        member: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv { path: path.into(), source }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
