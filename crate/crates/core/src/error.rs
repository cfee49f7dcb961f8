use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("internal consistency: {0}")]
    Internal(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("training diverged at iteration {iteration}: {msg}")]
    Diverged { iteration: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier, printed by the command-line tool.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::Numerical(_) => "numerical",
            Error::Internal(_) => "internal",
            Error::Parse { .. } => "parse",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }

    /// The message without the class prefix.
    pub fn detail(&self) -> String {
        match self {
            Error::InvalidInput(m) | Error::Numerical(m) | Error::Internal(m) => m.clone(),
            Error::Parse { line, msg } => format!("line {line}: {msg}"),
            Error::Diverged { iteration, msg } => format!("iteration {iteration}: {msg}"),
            Error::Io(e) => e.to_string(),
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T, Error> {
    Err(Error::InvalidInput(msg.into()))
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
