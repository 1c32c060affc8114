use std::fmt;

/// A single problem found while validating a dataset or model.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    /// Record index, or `None` for dataset-level problems.
    pub index: Option<usize>,
    pub field: &'static str,
    pub violation: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{} {} at index {}", self.field, self.violation, i),
            None => write!(f, "{}", self.violation),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("singular covariance: {0}")]
    SingularCovariance(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(
        "component {component} has vanishing responsibility (q_j = {total:e}); \
         use a covariance regularizer w > 0"
    )]
    DegenerateComponent { component: usize, total: f64 },

    #[error("invalid hyperparameters: {0}")]
    Hyperparameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("validation failed: {}", format_diagnostics(.0))]
    Validation(Vec<Diagnostic>),

    #[error("{}", match .line { Some(l) => format!("parse error on line {l}: {}", .message), None => format!("parse error: {}", .message) })]
    Parse { line: Option<usize>, message: String },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Error {
        Error::Iteration {
            iteration,
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularCovariance(_) | Error::DegenerateComponent { .. } => true,
            Error::Iteration { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

fn format_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
