use thiserror::Error;

/// Errors produced by the library.
///
/// Variants fall into two families, which the CLI maps to distinct exit
/// codes: invalid inputs ([`Error::is_validation`]) and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid capacity region: {0}")]
    InvalidRegion(String),

    #[error("invalid traffic model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("state {state:?} lies outside the box [0, {bound}]^R")]
    OutOfBox { state: Vec<u32>, bound: u32 },

    #[error("resource budget exceeded: {needed} entries requested, budget is {budget}")]
    Budget { needed: u128, budget: usize },

    #[error("routing matrix spectral radius {radius:.12} is not certified below 1 - {margin:e}")]
    SpectralRadius { radius: f64, margin: f64 },

    #[error("allocation solver failed to certify KKT conditions (residual {residual:e}) after {iterations} iterations")]
    SolverFailure { residual: f64, iterations: usize },

    #[error("allocator failed at state {state:?}: {source}")]
    AllocatorAt {
        state: Vec<u32>,
        #[source]
        source: Box<Error>,
    },

    #[error("truncated chain is reducible: {0}")]
    Reducible(String),

    #[error("stationary solve did not converge: {0}")]
    Convergence(String),

    #[error("fluid integrator step-size failure at t = {time}: {reason}")]
    StepSize { time: f64, reason: String },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::DimensionMismatch { .. }
            | Error::InvalidRegion(_)
            | Error::InvalidModel(_)
            | Error::InvalidArgument(_)
            | Error::OutOfBox { .. }
            | Error::Budget { .. }
            | Error::Scenario(_)
            | Error::Json(_)
            | Error::Io(_) => true,
            Error::AllocatorAt { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
