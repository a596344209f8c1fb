use thiserror::Error;

/// Broad failure classes. The CLI maps each to a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Infeasible,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cluster capacity exceeded: {0}")]
    CapacityExceeded(String),

    #[error("influence reachability violated: {0}")]
    Unreachable(String),

    #[error("unstable mean dynamics (spectral radius {spectral_radius:.6}): {detail}")]
    Unstable { spectral_radius: f64, detail: String },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidParameter(_)
            | Error::CapacityExceeded(_)
            | Error::Parse(_)
            | Error::Io(_)
            | Error::Csv(_) => ErrorClass::Config,
            Error::Unreachable(_) | Error::Unstable { .. } | Error::Infeasible(_) => ErrorClass::Infeasible,
            Error::Numerical(_) => ErrorClass::Numerical,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
