use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("drift returned a non-finite value at {point:?}")]
    NonFiniteDrift { point: Vec<f64> },

    #[error("trajectory diverged at t = {time}: |x| = {norm:e} exceeds the blow-up bound {bound:e}")]
    Diverged { time: f64, norm: f64, bound: f64 },

    #[error("truncation loss {loss:.3e} exceeds {limit:.0e}; enlarge the grid box")]
    Truncation { loss: f64, limit: f64 },

    #[error("hole centre {center:?} lies outside the grid box [-{half_width}, {half_width}]^d")]
    HoleOutsideBox { center: Vec<f64>, half_width: f64 },

    #[error("power iteration did not converge after {iterations} iterations (last ratio gap {gap:e})")]
    NoConvergence { iterations: usize, gap: f64 },

    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("oscillation radius {eps} is below the cell width {width}")]
    RadiusBelowCell { eps: f64, width: f64 },

    #[error("target mass {target:e} exceeds the reachable mass {reachable:e}")]
    Unreachable { target: f64, reachable: f64 },

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
