use crate::data::Modality;
use crate::numerics::NumericsError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("instance {id}: {modality} modality is missing")]
    MissingModality { id: u64, modality: Modality },
    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("requested top-{requested} but only {available} entries are retrievable")]
    InsufficientCorpus { requested: usize, available: usize },
    #[error("query has zero norm and cannot be ranked")]
    NonRetrievable,
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Divergence { epoch: usize, step: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the CLI: 2 for configuration problems, 3 for
    /// numeric failures, 4 for I/O and file-format errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Precondition(_)
            | Error::InsufficientCorpus { .. }
            | Error::LabelOutOfRange { .. }
            | Error::TokenOutOfRange { .. }
            | Error::MissingModality { .. } => 2,
            Error::Numerics(_) | Error::Divergence { .. } | Error::NonRetrievable => 3,
            Error::Io(_) | Error::Format { .. } | Error::UnsupportedVersion { .. } => 4,
        }
    }
}
