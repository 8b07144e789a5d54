use alloc::string::String;
use core::fmt;

/// Every failure the core can report.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Extents or ranks disagree with what an operation needs.
    Dimension(String),
    /// A configuration value is out of range or inconsistent.
    Config(String),
    /// An API was called in a way its contract forbids.
    Usage(String),
    /// An input value violates a domain invariant (e.g. embedding not unit-norm).
    Validation(String),
    /// A forward op produced NaN or infinity.
    NonFinite(String),
    /// Triplet slot received an edit operator of the wrong kind.
    Schema(String),
    /// Landmarks cannot define a similarity transform.
    Alignment(String),
    /// Serialized data is malformed or does not match the model.
    Load(String),
    /// Text input could not be parsed.
    Parse { line: usize, message: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Schema(m) => write!(f, "schema error: {m}"),
            Error::Alignment(m) => write!(f, "alignment error: {m}"),
            Error::Load(m) => write!(f, "load error: {m}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
        }
    }
}

impl core::error::Error for Error {}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
