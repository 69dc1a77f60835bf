use std::fmt;

/// Crate-wide error type. The CLI maps variants onto exit codes
/// (usage/config -> 1, I/O and parse -> 2, divergence -> 3).
#[derive(Debug)]
pub enum Error {
    /// Caller violated an operation's precondition (bad index, shape
    /// mismatch, out-of-range hyper-parameter, ...).
    InvalidInput(String),
    /// Run-config problem: unknown key, missing section, bad value.
    Config(String),
    /// Corpus or checkpoint file did not parse. `line` is 1-based and 0
    /// for binary formats.
    Parse { line: usize, msg: String },
    Io(std::io::Error),
    /// Training produced a non-finite loss.
    Divergence { iteration: usize, loss: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Parse { line, msg } => {
                if *line == 0 {
                    write!(f, "parse error: {msg}")
                } else {
                    write!(f, "parse error at line {line}: {msg}")
                }
            }
            Error::Io(err) => write!(f, "i/o error: {err}"),
            Error::Divergence { iteration, loss } => {
                write!(f, "training diverged at iteration {iteration} (loss = {loss})")
            }
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
