//! Error type shared across the engine.
//!
//! Variants are grouped by how a caller should react: configuration and
//! contract problems are caller bugs, data problems point at a file or
//! stream, and remote problems mean the analyst backend is unreachable
//! after retries.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MelError {
    /// Invalid configuration value or unusable argument combination.
    #[error("config error: {0}")]
    Config(String),

    /// A file or stream exists but its contents cannot be used.
    #[error("data error: {0}")]
    Data(String),

    /// An operation precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Token serialization hit a symbol the vocabulary does not contain.
    #[error("serialization error: unknown symbol `{0}`")]
    UnknownSymbol(String),

    /// Remote analyst failure that survived the retry budget.
    #[error("remote analyst error: {0}")]
    Remote(String),

    /// Checkpoint format version does not match this build.
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MelError {
    /// Process exit code the CLI maps this error to.
    ///
    /// 1 = usage/config, 2 = data/parse, 3 = remote backend unreachable.
    pub fn exit_code(&self) -> i32 {
        match self {
            MelError::Config(_) | MelError::Contract(_) => 1,
            MelError::Data(_)
            | MelError::UnknownSymbol(_)
            | MelError::Version { .. }
            | MelError::Io(_) => 2,
            MelError::Remote(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, MelError>;
