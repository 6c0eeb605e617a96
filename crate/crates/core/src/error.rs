use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("unknown correlation model `{0}`")]
    UnknownModel(String),

    #[error("invalid correlation table: {0}")]
    InvalidTable(String),

    #[error("correlation model evaluation failed: {0}")]
    ModelEvaluation(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The requested field distortion cannot be met with this many sensors.
    #[error("N = {n} is too small for the distortion target{}", match .smallest_feasible {
        Some(k) => format!(" (smallest feasible N is {k})"),
        None => String::new(),
    })]
    TooFewSensors {
        n: usize,
        smallest_feasible: Option<usize>,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// p_max is infinite: the target is met even by the all-zero estimate.
    #[error("largest admissible noise variance is unbounded for distortion {0}")]
    Unbounded(f64),

    #[error("ill-conditioned system: {0}")]
    Conditioning(String),

    #[error("no feasible number of sub-intervals K <= {k_max}")]
    NoFeasibleK { k_max: usize },

    #[error("K = {k} is infeasible: {reason}")]
    InfeasibleK { k: usize, reason: String },

    #[error("iteration did not converge after {iterations} steps (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors that mean "this configuration cannot meet its target",
    /// as opposed to malformed input or I/O failures.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            Error::TooFewSensors { .. }
                | Error::Unbounded(_)
                | Error::NoFeasibleK { .. }
                | Error::InfeasibleK { .. }
                | Error::Precondition(_)
        )
    }
}
