use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto process exit codes,
/// so keep the grouping stable: config problems, numeric blow-ups, and
/// input/validation failures are distinct categories.
#[derive(Debug, Error)]
pub enum DfmError {
    /// An argument is outside its declared domain (bad id, bad length, bad step size).
    #[error("input domain: {0}")]
    InputDomain(String),

    /// A numeric value that must be finite is not.
    #[error("numeric domain: {0}")]
    NumericDomain(String),

    /// ODE integration produced a non-finite state.
    #[error("trajectory diverged at step {step}: {detail}")]
    TrajectoryDiverged { step: usize, detail: String },

    /// A score is requested that is undefined for the given inputs
    /// (e.g. consistency with no prior notes).
    #[error("undefined score: {0}")]
    UndefinedScore(String),

    /// A cross-field or cross-file consistency check failed.
    #[error("validation: {0}")]
    Validation(String),

    /// Config file could not be read or parsed.
    #[error("config: {0}")]
    Config(String),

    /// Checkpoint bytes are malformed or from an unsupported version.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DfmError>;

impl DfmError {
    /// Process exit code for the CLI: 2 config, 3 numeric divergence,
    /// 4 validation/input failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            DfmError::Config(_) => 2,
            DfmError::NumericDomain(_) | DfmError::TrajectoryDiverged { .. } => 3,
            DfmError::InputDomain(_)
            | DfmError::Validation(_)
            | DfmError::UndefinedScore(_)
            | DfmError::Checkpoint(_) => 4,
            DfmError::Io(_) => 1,
        }
    }
}
