use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no data left: {0}")]
    EmptyData(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate scale: {0}")]
    DegenerateScale(String),
    #[error("grid mismatch: {0}")]
    Grid(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("unsupported oracle: {0}")]
    UnsupportedOracle(String),
}

impl Error {
    /// True for failures caused by the data rather than the caller's configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::EmptyData(_) | Error::InsufficientData(_))
    }

    /// True for numerical failures (degenerate scales, non-converging fits).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::DegenerateScale(_) | Error::Fit(_))
    }
}
