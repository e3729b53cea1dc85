use std::path::PathBuf;

use thiserror::Error;

use crate::gaussian::VariableKey;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (scenario file, noise model, CLI arguments).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("under-constrained graph: no information on {}", format_keys(.variables))]
    UnderConstrained { variables: Vec<VariableKey> },

    #[error("relinearization required for {key}: linearization points differ by {offset:.3e}")]
    RelinearizationRequired { key: VariableKey, offset: f64 },

    #[error("sampling unavailable: {0}")]
    SamplingUnavailable(String),

    #[error("lookup model: {0}")]
    Lookup(String),

    #[error("decode error: {0}")]
    Decode(#[from] crate::fusion::wire::DecodeError),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn format_keys(keys: &[VariableKey]) -> String {
    keys.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}
