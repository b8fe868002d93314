use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("rank-deficient design matrix: {0}")]
    RankDeficient(String),

    #[error("schedule invariant violated: {0}")]
    ScheduleInvariant(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize, last_good: Box<crate::diffusion::DiffusionModel> },

    #[error("non-finite state during sampling at step t={t}")]
    NonFiniteSampling { t: usize },

    #[error("not a {expected} file (bad magic bytes)")]
    BadMagic { expected: &'static str },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version { what: &'static str, found: u16, expected: u16 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
