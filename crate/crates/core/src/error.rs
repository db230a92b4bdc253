use std::fmt;

use thiserror::Error;

use crate::netmodel::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure category, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Malformed or inconsistent input data.
    Input,
    /// A numerical procedure failed to converge.
    Numerical,
    /// The requested problem has no feasible point.
    Infeasible,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },

    #[error("invalid case: {}", DiagList(.0))]
    InvalidCase(Vec<Diagnostic>),

    #[error("unsupported case data: {0}")]
    Unsupported(String),

    #[error("unknown bus id {0}")]
    UnknownBus(u32),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular power flow Jacobian at Newton iteration {iteration}")]
    SingularJacobian { iteration: usize },

    #[error("scenario data: {0}")]
    Scenario(String),

    #[error("no scenarios")]
    NoScenarios,

    #[error("target correlation matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("empty dataset: all {rejected} candidate samples were rejected")]
    EmptyDataset { rejected: usize },

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    TrainingDiverged { epoch: usize },

    #[error("degenerate training data: {0}")]
    Degenerate(String),

    #[error("requested {requested} PLS components but the predictors have rank {rank}")]
    RankExceeded { requested: usize, rank: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("multi-index set of size {size} exceeds the cap of {cap}")]
    BasisTooLarge { size: u128, cap: usize },

    #[error("Gram numerically singular; reduce m or s, or standardize inputs")]
    GramSingular,

    #[error("interior-point solver hit the iteration limit ({iterations}); most violated: {constraint} by {violation:.3e}")]
    MaxIterations {
        iterations: usize,
        constraint: String,
        violation: f64,
    },

    #[error("restoration failure; most violated constraint: {constraint} by {violation:.3e}")]
    Restoration { constraint: String, violation: f64 },

    #[error("chance constraints jointly infeasible at requested ε ({constraint}: {lower} > {upper})")]
    CrossedBounds {
        constraint: String,
        lower: f64,
        upper: f64,
    },

    #[error("tightening did not converge within {k_max} iterations (largest margin {max_margin:.3e} on {constraint})")]
    NotConverged {
        k_max: usize,
        max_margin: f64,
        constraint: String,
    },

    #[error("iteration {iteration}: {error}")]
    Iteration { iteration: usize, error: Box<Error> },

    #[error("model file: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::SingularJacobian { .. }
            | Error::TrainingDiverged { .. }
            | Error::GramSingular
            | Error::MaxIterations { .. }
            | Error::NotConverged { .. } => ErrorKind::Numerical,
            Error::Restoration { .. } | Error::CrossedBounds { .. } => ErrorKind::Infeasible,
            Error::Iteration { error, .. } => error.kind(),
            _ => ErrorKind::Input,
        }
    }

    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            e @ Error::Iteration { .. } => e,
            e => Error::Iteration {
                iteration,
                error: Box::new(e),
            },
        }
    }
}

struct DiagList<'a>(&'a [Diagnostic]);

impl fmt::Display for DiagList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{d}")?;
        }
        Ok(())
    }
}
