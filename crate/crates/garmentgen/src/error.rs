//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variants map to the failure categories surfaced by
/// the CLI as machine-parsable one-liners.
#[derive(Error, Debug)]
pub enum GarmentError {
    /// An argument violated a precondition (out of range, wrong ordering, ...).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Tensor shapes did not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A semantic contract was violated (wrong layout tag, wrong role, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Division by a vanishing schedule coefficient.
    #[error("singularity error: {0}")]
    Singularity(String),

    /// Template matching against a constant template has no defined peak.
    #[error("undefined-match error: {0}")]
    UndefinedMatch(String),

    /// A metric was asked to aggregate over an empty region.
    #[error("undefined error: {0}")]
    Undefined(String),

    /// Stored data failed digest verification.
    #[error("corruption error: {0}")]
    Corruption(String),

    /// A checkpoint or dataset could not be loaded.
    #[error("load error: {0}")]
    Load(String),

    /// Configuration file or flag schema violation.
    #[error("config error: {0}")]
    Config(String),

    /// Training diverged (non-finite loss).
    #[error("divergence error: {0}")]
    Divergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GarmentError>;

impl GarmentError {
    /// Stable one-word category used by the CLI for machine-parsable errors.
    pub fn category(&self) -> &'static str {
        match self {
            GarmentError::Parameter(_) => "parameter",
            GarmentError::Shape(_) => "shape",
            GarmentError::Contract(_) => "contract",
            GarmentError::Singularity(_) => "singularity",
            GarmentError::UndefinedMatch(_) => "undefined-match",
            GarmentError::Undefined(_) => "undefined",
            GarmentError::Corruption(_) => "corruption",
            GarmentError::Load(_) => "load",
            GarmentError::Config(_) => "config",
            GarmentError::Divergence(_) => "divergence",
            GarmentError::Io(_) => "io",
            GarmentError::Image(_) => "image",
            GarmentError::Json(_) => "json",
        }
    }
}
