use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration parameter.
    #[error("config error: {0}")]
    Config(String),

    /// The in-control model produced an invalid kernel.
    #[error("model error: {0}")]
    Model(String),

    /// Inputs that should line up do not.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("insufficient conditioned samples at t={t}: got {got}, need {needed}")]
    Insufficient { t: usize, got: usize, needed: usize },

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
