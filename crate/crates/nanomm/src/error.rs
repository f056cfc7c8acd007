//! Error type shared by every layer of the crate.
//!
//! Numeric code returns `Result` instead of panicking: shape mismatches,
//! invalid hyper-parameters, and non-finite intermediates are all ordinary,
//! diagnosable failures at this scale, and the CLI maps them to exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up. Includes both shapes so the message is
    /// actionable without a debugger.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A hyper-parameter or argument is outside its legal range.
    #[error("invalid argument for {op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    /// An operation produced NaN or Inf. The op name pinpoints the first
    /// offender rather than letting the poison propagate.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// A documented API contract was violated by the caller.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// An algorithm failed numerically (e.g. a transport kernel lost all of
    /// its mass to underflow). Carries enough context to diagnose.
    #[error("numerical failure in {op}: {detail}")]
    Numerical { op: &'static str, detail: String },

    /// Tokenizer met a word that is not in the vocabulary.
    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArg { .. } => 2,
            Error::NonFinite { .. } => 3,
            Error::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}
