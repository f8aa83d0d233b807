use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("window holds {got} samples, one period needs {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("positive-sequence grid voltage {0} pu is too low for a current reference")]
    VoltageTooLow(f64),
    #[error("mean DC additive current {0} pu is too low to size the zero-sequence DC voltage")]
    CurrentTooLow(f64),
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scenario file: {0}")]
    Parse(String),
}
