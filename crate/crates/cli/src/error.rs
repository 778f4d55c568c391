use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Other = 1,
    Validation = 2,
    MissingDependency = 3,
    Backend = 4,
}

pub struct CliError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl fmt::Debug for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {:#}", self.kind, self.error)
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        Self {
            kind: ExitKind::Other,
            error: e.into(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn validation(e: impl Into<anyhow::Error>) -> CliError {
    CliError {
        kind: ExitKind::Validation,
        error: e.into(),
    }
}

pub fn backend(e: impl Into<anyhow::Error>) -> CliError {
    CliError {
        kind: ExitKind::Backend,
        error: e.into(),
    }
}

/// An upstream artifact is missing; `producer` names the command that makes it.
pub fn missing(what: impl fmt::Display, producer: &str) -> CliError {
    CliError {
        kind: ExitKind::MissingDependency,
        error: anyhow::anyhow!("{what} not found; run `mmnav {producer}` first"),
    }
}
