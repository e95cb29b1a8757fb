use alloc::string::String;

/// Errors raised by the core algorithms.
///
/// Every variant carries a human-readable context string; callers in the
/// std companion map variants onto process exit codes.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes or sizes are incompatible (crop too large, non-divisible dims, ...).
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Metadata that must agree does not (duplicate cube locations, mask/batch mismatch, ...).
    #[error("consistency error: {0}")]
    Consistency(String),
    /// A non-finite value showed up where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Invalid phantom/dataset specification.
    #[error("spec error: {0}")]
    Spec(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
