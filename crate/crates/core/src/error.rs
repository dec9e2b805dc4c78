use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core runtime.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("context limit exceeded: {len} > {limit}")]
    ContextLimit { len: usize, limit: usize },
    #[error("process reward undefined: both directions are zero")]
    UndefinedReward,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(alloc::format!($($arg)*))
    };
}
pub(crate) use contract;
