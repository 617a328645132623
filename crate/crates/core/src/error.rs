use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An index (token, class, step) fell outside its valid range.
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// A precondition on a scalar argument or configuration was violated.
    Contract { op: &'static str, detail: String },
    /// A NaN or infinity showed up where finite values are required.
    NonFinite { name: String },
    /// A packed buffer holds a reserved code or has the wrong length.
    Corrupt { detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "{op}: dimension mismatch between {left:?} and {right:?}")
            }
            Error::Index { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (must be < {bound})")
            }
            Error::Contract { op, detail } => write!(f, "{op}: {detail}"),
            Error::NonFinite { name } => write!(f, "non-finite value in {name}"),
            Error::Corrupt { detail } => write!(f, "corrupt packed data: {detail}"),
        }
    }
}

impl core::error::Error for Error {}
