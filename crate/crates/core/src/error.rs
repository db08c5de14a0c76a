use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid path family: {0}")]
    InvalidFamily(String),

    #[error("node index {index} out of range (last admissible index {max})")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("paths live on different grids")]
    SpecMismatch,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("enumeration would produce {requested} items, cap is {cap}")]
    CapExceeded { requested: u128, cap: u64 },

    #[error("step {step} is not a positive multiple of the grid spacing {spacing}")]
    StepNotGridMultiple { step: f64, spacing: f64 },

    #[error("operation needs t < T, got the terminal node")]
    AtHorizon,

    #[error("no table entry for the stopped path at node {t_idx}")]
    KeyMiss { t_idx: usize },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("control set is empty")]
    EmptyControls,

    #[error("velocity projection defect {defect} exceeds limit {limit}")]
    ProjectionDefect { defect: f64, limit: f64 },

    #[error("terminal condition violated: phi1(T, x) - phi2(T, x) = {gap} > 0 for family member {path_index}")]
    BoundaryViolation { path_index: usize, gap: f64 },

    #[error("maximizer is not interior (t = {t_idx}, tau = {tau_idx})")]
    NotInterior { t_idx: usize, tau_idx: usize },

    #[error("touching condition fails: {0}")]
    TouchingFailed(String),

    #[error("expression error: {0}")]
    Expr(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
