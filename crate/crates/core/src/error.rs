use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("panel construction failed: {0}")]
    Construction(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    #[error("variable `{0}` already exists")]
    DuplicateVariable(String),

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("rank-deficient design; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    #[error("no within variation in regressor `{0}`")]
    NoWithinVariation(String),

    #[error("no usable instruments: {0}")]
    NoInstruments(String),

    #[error("unit root: long-run elasticity undefined (rho = {0})")]
    UnitRoot(f64),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
