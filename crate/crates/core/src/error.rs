//! Error type shared by every pipeline stage.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    /// A record or tensor violates one of its invariants; `field` names the culprit.
    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("bad magic: expected \"WSC1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("shape/data-length mismatch for tensor `{name}`: shape implies {expected} values, found {found}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("unknown layer `{name}`; available layers: {}", available.join(", "))]
    UnknownLayer { name: String, available: Vec<String> },

    #[error("tensor `{name}` has {found} dimensions, expected {expected}")]
    Dimensionality {
        name: String,
        expected: &'static str,
        found: usize,
    },

    #[error("dimension mismatch{}: expected {expected}, found {found}", context_suffix(.context))]
    DimMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("EM collapse: component {component} lost all support twice")]
    EmCollapse { component: usize },

    #[error("every candidate component count exceeds the {n_points} available vectors")]
    AllCandidatesSkipped { n_points: usize },

    #[error("contamination: network `{network_id}` is labeled backdoored")]
    Contamination { network_id: String },

    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),

    #[error("corpus inconsistency: network `{network_id}` {message}")]
    CorpusInconsistency { network_id: String, message: String },

    #[error("evaluation needs both clean and backdoored networks; found only {0}")]
    SingleClass(&'static str),

    #[error("trigger of size {size} at ({row}, {col}) does not fit in a {side}x{side} image")]
    TriggerOutOfBounds {
        size: usize,
        row: usize,
        col: usize,
        side: usize,
    },

    #[error("training diverged at epoch {epoch} (seed {seed}): loss became non-finite")]
    TrainingDiverged { epoch: usize, seed: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dim_mismatch(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimMismatch {
            context: context.into(),
            expected,
            found,
        }
    }
}
