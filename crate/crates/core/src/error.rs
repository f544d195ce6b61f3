use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NonSymmetric(f64),

    #[error("non-finite value encountered in {0}")]
    NotFinite(&'static str),

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("unsupported dimension {0} (expected 2 or 3)")]
    UnsupportedDimension(usize),

    #[error("(d, r, gamma) = ({d}, {r}, {gamma}) is not admissible")]
    Inadmissible { d: usize, r: f64, gamma: f64 },

    #[error("input must have zero mean (|mean integral| = {0:e})")]
    NonZeroMean(f64),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("{solver} diverged: {reason}")]
    Divergence { solver: &'static str, reason: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter(msg()))
    }
}
