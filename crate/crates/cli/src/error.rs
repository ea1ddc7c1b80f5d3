use std::path::Path;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, settings or config document; exit code 1.
    Usage(String),
    /// Missing or malformed data or model, failed computation, unwritable output; exit code 2.
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<yieldxai::Error> for CliError {
    fn from(e: yieldxai::Error) -> Self {
        match e {
            yieldxai::Error::Config(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(format!("writing csv: {e}"))
    }
}
