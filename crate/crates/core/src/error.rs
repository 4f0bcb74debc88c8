use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain violation: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite state at t = {t}, x = {x} ({population})")]
    NonFinite {
        t: f64,
        x: f64,
        population: &'static str,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("singular: {0}")]
    Singular(String),
}

pub type Result<T> = std::result::Result<T, Error>;
