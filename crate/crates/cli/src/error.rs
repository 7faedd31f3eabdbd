use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("{0}")]
    Invariant(String),

    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Missing(_) => 2,
            CliError::Invariant(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<ssync_core::Error> for CliError {
    fn from(e: ssync_core::Error) -> Self {
        use ssync_core::Error as E;
        match e {
            E::Config(msg) => CliError::Config(msg),
            E::Io(io) => CliError::Io(io.to_string()),
            other @ (E::Shape(_)
            | E::NonFinite(_)
            | E::DegenerateRow { .. }
            | E::DegenerateVector
            | E::Invariant { .. }
            | E::Hook { .. }
            | E::MissingEntry { .. }
            | E::DuplicateEntry { .. }
            | E::Format(_)) => CliError::Invariant(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
