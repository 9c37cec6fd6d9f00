use alloc::string::String;

/// Errors raised by the core engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{what}: expected dimension {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{section}: row {row} contains a non-finite value")]
    NonFinite { section: String, row: usize },
    #[error("{section}: row {row} has zero norm")]
    ZeroNorm { section: String, row: usize },
    #[error("cannot normalize a zero or non-finite vector")]
    Normalization,
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("invalid {name}: {reason}")]
    InvalidParameter {
        name: &'static str,
        reason: &'static str,
    },
    #[error("{0} must contain at least one ID and one OOD sample")]
    SingleClass(&'static str),
    #[error("missing {0}")]
    Missing(&'static str),
    #[error("argument {name} = {value} lies outside the open interval (0, 1)")]
    Domain { name: &'static str, value: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: &'static str) -> Self {
        Error::InvalidParameter { name, reason }
    }
}
