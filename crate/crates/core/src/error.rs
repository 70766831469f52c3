use alloc::string::String;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("integrity error: {0}")]
    Integrity(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $($t:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::Argument(alloc::format!($($t)*)));
        }
    };
}

pub(crate) use ensure;
