use std::fmt;
use std::path::Path;

use iflow::Error;

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) => CliError::Io(msg),
            Error::Shape { .. }
            | Error::Config(_)
            | Error::Precondition(_)
            | Error::Parse { .. }
            | Error::Json(_)
            | Error::EmptyGraph
            | Error::InvalidEdge(..)
            | Error::NotSymmetric { .. }
            | Error::NotPositiveDefinite
            | Error::NonScalarRoot { .. } => CliError::Usage(msg),
            Error::Singular
            | Error::SingularJacobian { .. }
            | Error::NoConvergence { .. }
            | Error::NonConvergent { .. }
            | Error::NonFinite { .. }
            | Error::InapplicableRegime { .. }
            | Error::NonFiniteState { .. } => CliError::Numerical(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
