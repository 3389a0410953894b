use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("input file not found: {0}")]
    MissingFile(PathBuf),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("column `{column}` not found (available: {available})")]
    MissingColumn { column: String, available: String },

    #[error("no valid rows in {path} ({dropped} dropped)")]
    NoValidRows { path: PathBuf, dropped: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("series too short: {0}")]
    TooShort(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True when the error was caused by bad user input rather than an
    /// internal failure. Drives the CLI exit code.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::MissingFile(_)
            | Error::MissingColumn { .. }
            | Error::NoValidRows { .. }
            | Error::InvalidArgument(_)
            | Error::TooShort(_)
            | Error::NonFinite { .. }
            | Error::LengthMismatch { .. }
            | Error::Config(_)
            | Error::Csv(_) => true,
            Error::Stage { source, .. } => source.is_user_error(),
            _ => false,
        }
    }
}

/// Pipeline stage a failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Split,
    Decompose,
    Normalize,
    Window,
    Train,
    Forecast,
    Score,
    Write,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Load => "load",
            Stage::Split => "split",
            Stage::Decompose => "decompose",
            Stage::Normalize => "normalize",
            Stage::Window => "window",
            Stage::Train => "train",
            Stage::Forecast => "forecast",
            Stage::Score => "score",
            Stage::Write => "write",
        };
        f.write_str(name)
    }
}

/// Attach a pipeline stage to any error.
pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| match e {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
