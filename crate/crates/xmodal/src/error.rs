/// Crate-wide error type.
///
/// Variants map onto the process exit codes used by the `xmodal` binary, see
/// [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u16, classes: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{context}: needs at least {needed} samples, got {got}")]
    InsufficientData {
        context: String,
        needed: usize,
        got: usize,
    },

    #[error("unknown layer '{0}'")]
    UnknownLayer(String),

    #[error("unknown modality {0}")]
    UnknownModality(u16),

    #[error("layer {0} has a positive penalty weight but no fitted density model")]
    MissingDensity(String),

    #[error("class {class} missing from {context}")]
    MissingClass { class: u16, context: String },

    #[error("training diverged at iteration {iteration}: loss is not finite")]
    Diverged { iteration: usize },

    #[error("dataset has no held-out classes; regenerate with --holdout-frac")]
    NoHoldout,

    #[error("config error: {0}")]
    Config(String),

    #[error("missing checkpoint {path}; run `xmodal train` first")]
    MissingCheckpoint { path: String },

    #[error("{path}: {message} (byte offset {offset})")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("gradient check failed: max relative error {max_rel_err:.3e} exceeds tolerance {tolerance:.1e}")]
    GradCheckFailed { max_rel_err: f64, tolerance: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI. 0 is success, 1 a generic failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) | Error::Format { .. } => 3,
            Error::Diverged { .. } => 4,
            Error::MissingCheckpoint { .. } => 5,
            Error::NoHoldout => 6,
            Error::GradCheckFailed { .. } => 7,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
