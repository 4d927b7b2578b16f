use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("tag stream is not sorted by time")]
    Unsorted,
    #[error("tag stream is empty")]
    EmptyStream,
    #[error("transit lists do not cover the same pairs")]
    PairMismatch,
    #[error("no correlation peak above the accidental floor")]
    NoCorrelationPeak,
    #[error("no matched-basis coincidences")]
    NoMatchedBasis,
    #[error("no positive key at any block length")]
    NoPositiveKey,
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("user `{0}` cannot be paired with itself")]
    SelfPairing(String),
    #[error("source busy")]
    SourceBusy,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

/// Fails unless `value` is finite and non-negative.
pub(crate) fn check_non_negative(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(invalid(format!(
            "{name} must be finite and >= 0, got {value}"
        )))
    }
}

pub(crate) fn check_fraction(name: &str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(invalid(format!("{name} must lie in [0, 1], got {value}")))
    }
}
