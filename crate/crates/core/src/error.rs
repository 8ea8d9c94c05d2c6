use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("could not place {objects} objects without overlap after {attempts} attempts")]
    Placement { objects: usize, attempts: usize },

    #[error("task {task} is infeasible for this scene: {reason}")]
    InfeasibleTask { task: String, reason: String },

    #[error("conditioning bundle does not match mode {mode}: {reason}")]
    ModeMismatch { mode: String, reason: String },

    #[error("training diverged at step {step} (batch {batch}): loss is {loss}")]
    Divergence { step: u64, batch: u64, loss: f64 },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported container version {found} (this build reads {supported})")]
    Version { found: u16, supported: u16 },

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("content hash mismatch for record {0}")]
    HashMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by on-disk data rather than by configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::Version { .. }
                | Error::Checksum { .. }
                | Error::Truncated(_)
                | Error::Malformed(_)
                | Error::HashMismatch(_)
                | Error::Io(_)
                | Error::Shape(_)
        )
    }
}
