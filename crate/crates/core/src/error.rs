use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("`{name}` = {value} is outside the supported range {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("numerical overflow while evaluating {0}")]
    Overflow(&'static str),

    #[error("marginal tabulation failed: {0}; widen the ξ range or refine the ξ step")]
    ReconstructionGrid(String),

    #[error("grid axes do not match: {0}")]
    AxisMismatch(String),

    #[error("blur kernel radius {radius:.4} exceeds the grid margin {margin:.4}; pad the grid by at least {required_padding:.4} per side")]
    MarginViolation {
        radius: f64,
        margin: f64,
        required_padding: f64,
    },

    #[error("configuration error in `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("malformed data file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user-supplied configuration rather than numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. }
                | Error::OutOfRange { .. }
                | Error::Config { .. }
                | Error::Json(_)
                | Error::Format(_)
        )
    }
}

pub(crate) fn ensure_finite(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::invalid(name, format!("must be finite, got {value}")))
    }
}
