use thiserror::Error;

use crate::episode::Role;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed trajectory: step {index} has role {found}, expected {expected}")]
    Structure {
        index: usize,
        expected: Role,
        found: Role,
    },

    #[error("index {index} out of range (valid range {min}..={max})")]
    Range { index: usize, min: usize, max: usize },

    #[error("non-finite logit contributed by feature {feature}")]
    NonFinite { feature: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("missing input file {}", .0.display())]
    MissingInput(std::path::PathBuf),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
