use thiserror::Error;

/// Command failure, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration or file contents. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Reading or writing failed. Exit code 2.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<geocond::Error> for CliError {
    fn from(e: geocond::Error) -> Self {
        match e {
            geocond::Error::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<geocond_diffusion::DiffusionError> for CliError {
    fn from(e: geocond_diffusion::DiffusionError) -> Self {
        use geocond_diffusion::DiffusionError as D;
        match e {
            D::Io(_) => CliError::Io(e.to_string()),
            D::Geometry(g) => g.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Attaches the path to an I/O failure.
pub fn at_path<T, E: std::fmt::Display>(r: std::result::Result<T, E>, path: &std::path::Path) -> Result<T> {
    r.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
