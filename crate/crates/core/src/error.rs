//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Consecutive layer shapes do not compose, or an input does not match
    /// the first layer.
    #[error("shape mismatch at layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },

    /// A 24-bit accumulator saturated during a calibration pass.
    #[error("accumulator saturated during calibration at layer {layer}")]
    CalibrationOverflow { layer: usize },

    /// A parameter is outside its documented domain.
    #[error("invalid parameter {name}: {detail}")]
    InvalidParameter { name: &'static str, detail: String },

    /// Model/importance/area-table inputs are mutually inconsistent.
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),

    /// Unsupported circuit configuration.
    #[error("unsupported circuit configuration: {0}")]
    UnsupportedCircuit(String),

    /// Missing key in a prebuilt lookup table.
    #[error("missing area-table entry for {0}")]
    MissingTableKey(String),

    /// Pruning requested on a constraint that is not monotone in the
    /// protection parameters.
    #[error("pruning rejected: {0} is not monotone in protection parameters")]
    NonMonotonePrune(&'static str),

    /// Malformed model, dataset, or importance file.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn invalid(name: &'static str, detail: impl Into<String>) -> Self {
        CoreError::InvalidParameter {
            name,
            detail: detail.into(),
        }
    }

    pub fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
