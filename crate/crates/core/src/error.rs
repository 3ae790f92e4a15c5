use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A hyperparameter is outside its domain (e.g. a nonpositive length-scale).
    #[error("parameter domain error: {0}")]
    ParameterDomain(String),

    /// Malformed input values (non-finite times, empty sequences, length mismatch).
    #[error("input error: {0}")]
    Input(String),

    /// Parameters that must agree across structures do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("numerical error: {message}")]
    Numerical { message: String, diagnostics: String },

    /// Record validation; lists every violation found.
    #[error("validation failed with {} violation(s): {}", .0.len(), .0.join("; "))]
    Validation(Vec<String>),

    #[error("parse error at {context}: {message}")]
    Parse { context: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    /// Every optimizer restart failed.
    #[error("fit failed: {}", .0.join("; "))]
    Fit(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numerical(message: impl Into<String>, diagnostics: impl Into<String>) -> Self {
        Error::Numerical {
            message: message.into(),
            diagnostics: diagnostics.into(),
        }
    }

    /// True for errors caused by bad user input rather than numerics.
    pub fn is_input(&self) -> bool {
        matches!(
            self,
            Error::ParameterDomain(_)
                | Error::Input(_)
                | Error::Consistency(_)
                | Error::Validation(_)
                | Error::Parse { .. }
                | Error::Config(_)
                | Error::Io(_)
        )
    }
}

pub(crate) fn ensure_positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::ParameterDomain(format!(
            "{name} must be positive and finite, got {value}"
        )))
    }
}

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("{name} must be finite, got {value}")))
    }
}
