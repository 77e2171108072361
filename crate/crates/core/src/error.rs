use std::path::PathBuf;

use thiserror::Error;

use crate::market::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid market: {}", join_violations(.0))]
    InvalidMarket(Vec<Violation>),

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate rank {rank} for buyer {buyer}")]
    DuplicateRank { buyer: usize, rank: u32 },

    #[error("bound unavailable: {0}")]
    BoundUnavailable(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("baseline solve did not converge (kkt residual {residual:.3e})")]
    BaselineNotConverged { residual: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
