use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LabError {
    /// Operand shapes do not conform.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A matrix that must be symmetric is not.
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    /// An argument lies outside its admissible range.
    #[error("domain error: {0}")]
    Domain(String),
    /// A construction would exceed a configured size cap.
    #[error("size limit exceeded: {0}")]
    Size(String),
    /// An iterative kernel failed to converge or broke down.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// A theoretical precondition of an analysis routine is violated.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// A flow produced a non-finite state.
    #[error("flow diverged after t = {last_finite_time}")]
    Divergence { last_finite_time: f64 },
    /// Training produced non-finite parameters or gradients.
    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: usize, detail: String },
    /// Malformed configuration or file.
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl LabError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        LabError::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        LabError::Domain(msg.into())
    }

    /// True for errors caused by bad inputs rather than numerical trouble.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            LabError::Dimension(_)
                | LabError::Asymmetric(_)
                | LabError::Domain(_)
                | LabError::Size(_)
                | LabError::Invalid(_)
                | LabError::Precondition(_)
        )
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Invalid(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
