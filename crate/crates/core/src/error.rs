use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not asymptotically stable: eigenvalue {re:.6e}{im:+.6e}i has non-negative real part")]
    Unstable { re: f64, im: f64 },

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("basis is not orthonormal: ||Q^T Q - I||_F = {0:.3e}")]
    NotOrthonormal(f64),

    #[error("tensor order {0} is odd; an even order is required")]
    OddOrder(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("simulation produced a non-finite state at t = {0}")]
    Diverged(f64),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from bad input rather than a solver breakdown.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Unstable { .. }
                | Error::NotOrthonormal(_)
                | Error::OddOrder(_)
                | Error::InvalidArgument(_)
                | Error::Io(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
