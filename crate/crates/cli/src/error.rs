use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, flags, or artifacts from a different configuration.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("synthesized loop violates the detection assumptions:\n{0}")]
    Assumptions(String),
    #[error("validation failed:\n{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] ltv_watermark::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Assumptions(_) => 3,
            CliError::Validation(_) => 4,
            CliError::Core(ltv_watermark::Error::InvalidParameter(_))
            | CliError::Core(ltv_watermark::Error::InsufficientSamples { .. }) => 2,
            CliError::Core(_) | CliError::Io { .. } => 1,
        })
    }
}
