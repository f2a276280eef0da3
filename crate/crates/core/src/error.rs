use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes: validation
/// and contract problems exit 2, I/O problems exit 3, calibration or
/// generation failures exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: object {index} field {field}: {reason}")]
    Validation {
        index: usize,
        field: &'static str,
        reason: String,
    },
    #[error("scene capacity exceeded: {given} objects, capacity {capacity}")]
    Capacity { given: usize, capacity: usize },
    #[error("contact box {index} has no matching object")]
    UnmatchedContact { index: usize },
    #[error("decode: {0}")]
    Decode(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("config: {0}")]
    Config(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("guidance term {term}: non-finite gradient")]
    Guidance { term: &'static str },
    #[error("calibration failed: best candidate E_pen={best_pen:.2} iou={best_iou:.3}")]
    CalibrationFailure { best_pen: f64, best_iou: f64 },
    #[error("generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },
    #[error("parse error at {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("unsupported file version {found}, expected {expected}")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("no catalog entry for category {0}")]
    Retrieval(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI shell.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Json(_) | Error::Parse { .. } | Error::UnsupportedVersion { .. } => 3,
            Error::CalibrationFailure { .. } | Error::Generation { .. } => 4,
            _ => 2,
        }
    }
}
