use thiserror::Error;

pub type Result<T, E = DfslError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DfslError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("column (sample {sample}, channel {channel}) has zero norm")]
    ZeroNormColumn { sample: usize, channel: usize },

    #[error("time points are not equally spaced (relative gap deviation {deviation:.3e})")]
    UnequalSpacing { deviation: f64 },

    #[error("autocorrelation matrix of channel {channel} is not valid: {reason}")]
    InvalidAutocorrelation { channel: usize, reason: String },

    #[error("basis columns are linearly dependent at column {column}")]
    RankDeficient { column: usize },

    #[error("wavelet synthesis needs a power-of-two length, got {len}; choose a segment length such as {suggestion}")]
    NotPowerOfTwo { len: usize, suggestion: usize },

    #[error("channel {channel}: {source}")]
    Channel {
        channel: usize,
        #[source]
        source: Box<DfslError>,
    },

    #[error("no tuning cell converged:\n{0}")]
    NoConvergedCell(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl DfslError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DfslError::InvalidInput(msg.into())
    }

    pub(crate) fn mismatch(msg: impl Into<String>) -> Self {
        DfslError::DimensionMismatch(msg.into())
    }
}
