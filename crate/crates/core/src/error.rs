use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("fields live on different cells")]
    CellMismatch,

    #[error("flow does not fit the cell: {0}")]
    Geometry(String),

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error(
        "eigenfunction lost positivity (min {min:.3e}); refine the grid or use the upwind scheme"
    )]
    LostPositivity { min: f64 },

    #[error("w is not a first integral: max |q.grad w| = {residual:.3e} exceeds {tolerance:.3e}")]
    NotFirstIntegral { residual: f64, tolerance: f64 },

    #[error("resolution {given} too coarse for the gap; need at least {required}")]
    UnderResolved { given: usize, required: usize },

    #[error("stream function incompatible: circulation {circulation:.3e}")]
    Circulation { circulation: f64 },
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
