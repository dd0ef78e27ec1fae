use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    EmptyLogits,
    Shape {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },
    NonFinite(String),
    LabelOutOfRange { label: usize, num_classes: usize },
    Config(String),
    Protocol(String),
    NotFitted,
    MissingDetector,
    Diverged { epoch: usize, step: usize },
    SingleClass,
    Empty(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyLogits => f.write_str("empty logits"),
            Error::Shape {
                what,
                expected,
                actual,
            } => write!(
                f,
                "{what}: expected {}x{}, got {}x{}",
                expected.0, expected.1, actual.0, actual.1
            ),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} outside known range 0..{num_classes}")
            }
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Protocol(msg) => write!(f, "protocol violation: {msg}"),
            Error::NotFitted => f.write_str("detector not fitted"),
            Error::MissingDetector => {
                f.write_str("method needs an unknown detector but none was supplied")
            }
            Error::Diverged { epoch, step } => {
                write!(f, "training diverged at epoch {epoch}, step {step}")
            }
            Error::SingleClass => {
                f.write_str("detector training set contains a single class")
            }
            Error::Empty(what) => write!(f, "empty {what}"),
        }
    }
}

impl core::error::Error for Error {}
