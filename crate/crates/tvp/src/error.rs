//! Error type shared across the crate.

use std::fmt;

/// Errors emitted by tensor ops, data loading, configuration and training.
#[derive(Debug)]
pub enum Error {
    /// Dimension or layout mismatch; names the offending dims.
    Shape(String),
    /// Invalid configuration value or combination.
    Config(String),
    /// Dataset / file-format problem.
    Data(String),
    /// Non-finite values, degenerate schedules, NaN losses.
    Numeric(String),
    /// Word not in the vocabulary, or instruction too long.
    Vocab(String),
    Io(std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Data(_) | Error::Vocab(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numerical error: {m}"),
            Error::Vocab(m) => write!(f, "vocabulary error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
