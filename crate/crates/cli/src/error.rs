use styletune_core::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// User errors exit with 1, everything else with 2.
#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match &e {
            Error::InvalidArgument(_)
            | Error::UnknownIds(_)
            | Error::Format(_)
            | Error::Json(_) => CliError::User(e.to_string()),
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::User(e.to_string())
            }
            Error::Image(_) => CliError::User(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}
