use alloc::string::String;
use core::fmt;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor shapes that do not line up for the requested operation.
    Dimension(String),
    /// An index (token id, class id, row) outside its valid range.
    Index(String),
    /// Bad caller input: empty corpus, overlong sequence, unknown token.
    Input(String),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// Operation attempted in the wrong state (consumed tape, wrong backbone).
    State(String),
    /// Delta or checkpoint does not belong to the loaded backbone.
    Compatibility(String),
    /// A name is already taken.
    Conflict(String),
    /// Persisted data could not be decoded.
    Format(String),
    /// A value failed validation against its declared schema.
    Validation(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Input(m) => write!(f, "input error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
            Error::Compatibility(m) => write!(f, "compatibility error: {m}"),
            Error::Conflict(m) => write!(f, "conflict error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
