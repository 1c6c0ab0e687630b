use std::fmt;

use spindrop_core::Error;

/// Command failure, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Exit code 1.
    Config(String),
    /// Exit code 2.
    Data(String),
    /// Exit code 3: diverged training or a failed equivalence check.
    Check(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Data(_) => 2,
            Failure::Check(_) => 3,
        }
    }

    /// Classifies a core error raised while reading input data.
    pub fn data(e: Error) -> Self {
        match e {
            Error::Diverged { .. } => Failure::Check(e.to_string()),
            Error::Config(_) | Error::Parameter(_) => Failure::Config(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }

    pub fn io(what: &str, e: std::io::Error) -> Self {
        Failure::Data(format!("{what}: {e}"))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } => Failure::Check(e.to_string()),
            Error::Format { .. } | Error::Io(_) | Error::Json(_) => Failure::Data(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Data(m) => write!(f, "data error: {m}"),
            Failure::Check(m) => write!(f, "{m}"),
        }
    }
}
