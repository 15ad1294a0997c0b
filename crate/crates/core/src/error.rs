use thiserror::Error;

pub type Result<T> = std::result::Result<T, ElfError>;

#[derive(Debug, Error)]
pub enum ElfError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid compressor: {0}")]
    InvalidCompressor(String),

    #[error("client index {index} out of range (n = {n})")]
    ClientOutOfRange { index: usize, n: usize },

    #[error("invalid potential: {0}")]
    InvalidPotential(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("chain diverged at round {round}: non-finite {what}")]
    Divergence { round: usize, what: &'static str },

    #[error("scripted noise exhausted at round {0}")]
    NoiseExhausted(usize),

    #[error("sampler state is missing {0} required by this algorithm")]
    MissingState(&'static str),

    #[error("inadmissible parameters: {0}")]
    Inadmissible(String),

    #[error("LSI constant mu is unknown for this potential; {0}")]
    MissingLsiConstant(String),

    #[error("not enough samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ledger round regression: message for round {got} after round {last}")]
    RoundRegression { last: usize, got: usize },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl ElfError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        ElfError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
