use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("sequence too short: {0}")]
    SequenceTooShort(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    #[error("empty mask set")]
    EmptyMask,
    #[error("infeasible alignment: {0}")]
    InfeasibleAlignment(String),
    #[error("degenerate utterance: {0}")]
    DegenerateUtterance(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("role error: {0}")]
    Role(String),
    #[error("version error: {0}")]
    Version(String),
    #[error("corrupt checkpoint: {0}")]
    Corruption(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } => 3,
            Error::Io(_) | Error::Version(_) | Error::Corruption(_) => 4,
            _ => 2,
        }
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
