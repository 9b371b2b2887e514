use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("solver failed: {message} (residual {residual:.3e})")]
    Solver { message: String, residual: f64 },

    #[error("simulation aborted at t = {t:.4} s: {message}")]
    SimAbort { t: f64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse { location: location.into(), message: message.into() }
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }

    pub(crate) fn solver(message: impl Into<String>, residual: f64) -> Self {
        Error::Solver { message: message.into(), residual }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invariant(_) => 1,
            Error::Parse { .. } | Error::Dimension { .. } | Error::Precondition(_) | Error::Io { .. } => 2,
            Error::Solver { .. } => 3,
            Error::SimAbort { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, got })
    }
}
