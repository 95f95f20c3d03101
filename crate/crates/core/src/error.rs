use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("duplicate cell for unit `{unit}` at time `{time}` (line {line})")]
    DuplicateCell { unit: String, time: String, line: u64 },

    #[error("unbalanced panel: no observation for unit `{unit}` at time `{time}`")]
    MissingCell { unit: String, time: String },

    #[error("unsupported design: {0}")]
    UnsupportedDesign(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient pre-treatment periods: need at least {needed}, have {have}")]
    InsufficientPrePeriods { needed: usize, have: usize },

    #[error("empty donor pool")]
    EmptyDonors,

    #[error("solver did not converge after {iterations} iterations (last gap {gap:.3e}, tolerance {tol:.3e})")]
    Convergence { iterations: usize, gap: f64, tol: f64 },

    #[error("collinear covariates: {0}")]
    Collinear(String),

    #[error("not defined: {0}")]
    NotDefined(String),

    #[error("non-stationary AR(2) fit: coefficients ({0:.4}, {1:.4}), characteristic roots {2}")]
    NonStationary(f64, f64, String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of an iterative numerical routine, as opposed to bad input.
    pub fn is_convergence(&self) -> bool {
        matches!(self, Error::Convergence { .. })
    }
}
