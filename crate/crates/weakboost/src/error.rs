use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("regime violation: {what} requires sigma^2 <= 4a (sigma^2 = {sigma2}, 4a = {four_a})")]
    Regime {
        what: &'static str,
        sigma2: f64,
        four_a: f64,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite sample at index {index}: {value}")]
    NonFinite { index: u64, value: f64 },
    #[error("exponential overflow: |x| = {x} exceeds the guard")]
    Overflow { x: f64 },
    #[error("integration did not converge: {0}")]
    Integration(String),
    #[error("zero pivot in tridiagonal solve at row {0}")]
    ZeroPivot(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
