use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("parameter partition mismatch: {0}")]
    Partition(String),

    #[error("degenerate direction: layer {entry} has zero norm but a nonzero reference")]
    DegenerateDirection { entry: usize },

    #[error("layer {0} is not immediately followed by batch normalization")]
    NotBatchNormFollowed(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("power iteration breakdown: {0}")]
    Breakdown(String),

    #[error("unsupported checkpoint format version {found} (this build reads up to {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by bad user input (config, files) rather than numerical failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Dataset(_)
                | Error::UnsupportedVersion { .. }
                | Error::Checksum
                | Error::Format { .. }
                | Error::Io(_)
                | Error::Json(_)
                | Error::NotBatchNormFollowed(_)
        )
    }
}
