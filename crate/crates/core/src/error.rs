use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate poi {0}")]
    DuplicatePoi(u64),

    #[error("dangling {kind} reference {id}")]
    Dangling { kind: &'static str, id: u64 },

    #[error("unknown {kind} {id}")]
    Unknown { kind: &'static str, id: u64 },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Empty(&'static str),

    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),

    #[error("degenerate embedding (zero norm)")]
    DegenerateEmbedding,

    #[error("no negative available for ({head}, {relation}, {tail}) after {attempts} attempts")]
    NoNegative {
        head: u32,
        relation: u32,
        tail: u32,
        attempts: usize,
    },

    #[error("{stage} diverged at epoch {epoch}: loss is not finite")]
    Divergence { stage: &'static str, epoch: usize },

    #[error("non-finite parameter after {0}")]
    NonFinite(String),

    #[error("privacy audit failed: {0}")]
    Audit(String),

    #[error("output directory {0} already holds a run manifest")]
    RunExists(PathBuf),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl std::fmt::Display, line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            reason: reason.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidHyperparams(_) | Error::InvalidArgument(_) | Error::RunExists(_) => {
                ErrorClass::Usage
            }
            Error::DegenerateEmbedding
            | Error::NoNegative { .. }
            | Error::Divergence { .. }
            | Error::NonFinite(_) => ErrorClass::Numerical,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
