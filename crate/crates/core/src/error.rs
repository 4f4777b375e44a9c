use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate parabolicity: z = {z} is not below the constraint level {limit}")]
    Degenerate { z: f64, limit: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stability condition violated: dt = {dt:e}, a_max = {a_max}, dx = {dx:e}")]
    Cfl { dt: f64, a_max: f64, dx: f64 },
    #[error("computational domain too small: {0}")]
    DomainTooSmall(String),
    #[error("numerical health failure: {0}")]
    Health(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
