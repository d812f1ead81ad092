use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("plot error: {0}")]
    Plot(String),
}

impl From<gradkit::GradError> for LabError {
    fn from(e: gradkit::GradError) -> Self {
        match e {
            gradkit::GradError::Config(m) => LabError::Config(m),
            gradkit::GradError::Numeric(m) => LabError::Numeric(m),
            gradkit::GradError::Usage(m) => LabError::Usage(m),
        }
    }
}

impl LabError {
    /// Process exit code: 2 for configuration problems, 3 for numeric
    /// divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
