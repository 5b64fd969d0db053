use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not agree.
    Shape { op: &'static str, detail: String },
    /// Caller-supplied data is out of range or empty.
    Input(String),
    /// A kernel produced NaN or an infinity.
    NumericFault { op: &'static str },
    /// Optimizer or meta state does not match the parameters it is applied to.
    State(String),
    /// Invalid configuration value.
    Config(String),
    /// Protocol violation, e.g. evaluating zero-shot on a source task.
    Protocol(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::NumericFault { op } => write!(f, "numeric fault: non-finite value after {op}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Protocol(msg) => write!(f, "protocol error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
