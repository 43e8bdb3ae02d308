//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A problem definition or solver configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data does not satisfy an operation precondition.
    #[error("data error: {0}")]
    Data(String),

    /// A query was made outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// The density dropped to or below its positivity floor.
    #[error("positivity violated at node {node}: rho = {rho:.6e} (floor {floor:.6e})")]
    Positivity { node: usize, rho: f64, floor: f64 },

    /// An iterative solver failed to reach its tolerance.
    #[error("solver did not converge: residual {residual:.6e} after {iterations} iterations (tol {tol:.6e})")]
    SolverDiverged {
        residual: f64,
        iterations: usize,
        tol: f64,
    },

    /// A boundary evolution step exceeded its CFL bound.
    #[error("CFL violation: requested step {requested:.6e}, admissible {admissible:.6e}")]
    CflViolation { requested: f64, admissible: f64 },

    /// Zero curvature along a descent direction with nonzero slope.
    #[error("degenerate descent direction: dE = {de:.6e} with zero curvature")]
    DegenerateDirection { de: f64 },

    /// A descent step could not be accepted after all retries.
    #[error("step failed after {retries} retries: {reason}")]
    StepFailed { retries: usize, reason: String },

    /// A verification operation was called with violated preconditions.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Declarative document could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
