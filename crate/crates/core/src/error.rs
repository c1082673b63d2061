use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invariant violated on `{field}`: {reason}")]
    Invariant { field: &'static str, reason: String },

    #[error("dimension error: {rows} rows cannot be assigned to {cols} columns")]
    Dimension { rows: usize, cols: usize },

    #[error("category {category} outside category space of size {num_categories}")]
    InvalidCategory { category: usize, num_categories: usize },

    #[error("exhaustive assignment limited to {max} rows, got {rows}")]
    TooLarge { rows: usize, max: usize },

    #[error("detector spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("model is frozen; parameter updates are rejected")]
    FrozenModel,

    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("annotation category sets overlap on category {0}")]
    CategoryOverlap(usize),

    #[error("old category set is empty")]
    EmptyOldCategories,

    #[error("query index {index} out of range for {len} queries")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("could not place {objects} objects without excessive overlap after {attempts} attempts")]
    PlacementFailure { objects: usize, attempts: usize },

    #[error("unknown category {0}")]
    UnknownCategory(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable snake_case name of the variant, for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Invariant { .. } => "invariant",
            Error::Dimension { .. } => "dimension",
            Error::InvalidCategory { .. } => "invalid_category",
            Error::TooLarge { .. } => "too_large",
            Error::SpecMismatch(_) => "spec_mismatch",
            Error::FrozenModel => "frozen_model",
            Error::Shape { .. } => "shape",
            Error::InvalidAssignment(_) => "invalid_assignment",
            Error::SizeMismatch(_) => "size_mismatch",
            Error::CategoryOverlap(_) => "category_overlap",
            Error::EmptyOldCategories => "empty_old_categories",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::NonFinite(_) => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::PlacementFailure { .. } => "placement_failure",
            Error::UnknownCategory(_) => "unknown_category",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn invariant(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invariant {
            field,
            reason: reason.into(),
        }
    }
}
