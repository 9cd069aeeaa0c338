use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("negative off-diagonal rate L({row},{col}) = {value}")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },

    #[error("row {row} of the sub-generator sums to {sum} > 0")]
    PositiveRowSum { row: usize, sum: f64 },

    #[error("no killing: every row of the sub-generator sums to zero")]
    NoKilling,

    #[error("chain is reducible: state {from} cannot reach state {to}")]
    Reducible { from: usize, to: usize },

    #[error("invalid birth-death rates: {0}")]
    InvalidRates(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Domain(String),

    #[error("parse error{}: {message}", location.as_ref().map(|l| format!(" at {l}")).unwrap_or_default())]
    Parse {
        message: String,
        location: Option<String>,
    },

    #[error("validation error in field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("degenerate spectral gap: gap {gap} below tolerance {tolerance}")]
    DegenerateGap { gap: f64, tolerance: f64 },

    #[error("right eigenfunction vanishes at state {state} (eta = {value})")]
    ZeroEta { state: usize, value: f64 },

    #[error("singular linear solve: {0}")]
    SingularSolve(String),

    #[error("matrix exponential overflowed (norm {norm}, order {order})")]
    OverflowGuard { norm: f64, order: usize },

    #[error("rejection sampling budget exceeded: expected {expected} attempts, budget {budget}")]
    BudgetExceeded { expected: f64, budget: f64 },

    #[error("degenerate asymptotic variance sigma^2 = {0}")]
    DegenerateVariance(f64),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Machine-parsable kind tag used by the CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NegativeOffDiagonal { .. } => "NegativeOffDiagonal",
            Error::PositiveRowSum { .. } => "PositiveRowSum",
            Error::NoKilling => "NoKilling",
            Error::Reducible { .. } => "Reducible",
            Error::InvalidRates(_) => "InvalidRates",
            Error::Shape(_) => "Shape",
            Error::Domain(_) => "Domain",
            Error::Parse { .. } => "ParseError",
            Error::Validation { .. } => "ValidationError",
            Error::DegenerateGap { .. } => "DegenerateGap",
            Error::ZeroEta { .. } => "ZeroEta",
            Error::SingularSolve(_) => "SingularSolve",
            Error::OverflowGuard { .. } => "OverflowGuard",
            Error::BudgetExceeded { .. } => "BudgetExceeded",
            Error::DegenerateVariance(_) => "DegenerateVariance",
            Error::Io(_) => "Io",
        }
    }

    /// True for errors caused by invalid models or inputs (as opposed to numerical failures).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::NegativeOffDiagonal { .. }
                | Error::PositiveRowSum { .. }
                | Error::NoKilling
                | Error::Reducible { .. }
                | Error::InvalidRates(_)
                | Error::Shape(_)
                | Error::Domain(_)
                | Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Io(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
