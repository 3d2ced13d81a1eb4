use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two shapes disagree along a named dimension.
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        found: usize,
    },
    /// A configuration value is inconsistent (bad group count, odd channels, ...).
    Config(String),
    /// API misuse: cross-tape handles, non-scalar loss, fused forward on unfused params.
    Usage(String),
    /// A parameter had no gradient entry when the optimizer stepped.
    MissingGradient(String),
    /// A gradient or loss contained NaN or infinity.
    NonFinite(String),
    /// Two-branch structure cannot be collapsed.
    Fusion(String),
    /// A learning-rate schedule was queried past its last stage.
    ScheduleExhausted { step: u64, total: u64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                op,
                dim,
                expected,
                found,
            } => write!(
                f,
                "{op}: shape mismatch in {dim}: expected {expected}, found {found}"
            ),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::MissingGradient(name) => write!(f, "no gradient for parameter `{name}`"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Fusion(msg) => write!(f, "fusion impossible: {msg}"),
            Error::ScheduleExhausted { step, total } => {
                write!(f, "schedule exhausted: step {step} beyond {total} total steps")
            }
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn mismatch(op: &'static str, dim: &'static str, expected: usize, found: usize) -> Error {
    Error::ShapeMismatch {
        op,
        dim,
        expected,
        found,
    }
}
