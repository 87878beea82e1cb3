//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or setting is outside its valid range.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a contract (empty shard, label out of range, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A binary input file is malformed; `offset` is where parsing diverged.
    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    /// An aggregation step could not produce a model (distinct from a bad
    /// configuration: signals total exclusion or degenerate inputs upstream).
    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A module error that occurred while executing a specific round.
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps any error with the federated round it occurred in.
    pub fn in_round(self, round: usize) -> Error {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
