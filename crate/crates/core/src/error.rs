use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("state within {floor:e} LU of a primary (d = {d:e}, r = {r:e})")]
    Singularity { d: f64, r: f64, floor: f64 },

    #[error("root solver did not converge on bracket [{lo}, {hi}]")]
    RootNotConverged { lo: f64, hi: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("integration exceeded {0} steps")]
    MaxSteps(usize),

    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("catalog line {line}: {msg}")]
    CatalogParse { line: usize, msg: String },

    #[error("catalog record {id}: {msg}")]
    CatalogValidation { id: String, msg: String },

    #[error("insufficient catalog span: requested C in [{lo}, {hi}], available [{min}, {max}]")]
    InsufficientSpan { lo: f64, hi: f64, min: f64, max: f64 },

    #[error("no admissible crossing of the section found within {0} TU")]
    NoCrossing(f64),

    #[error("spectrum has no eigenvalue of magnitude above {0}; orbit is not unstable")]
    NotUnstable(f64),

    #[error("section has no active coordinates")]
    EmptyActiveBlock,

    #[error("LMI infeasible after {iterations} iterations (best minimum eigenvalue {best_min_eig:e})")]
    Infeasible { iterations: usize, best_min_eig: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("index range {first}..={last} out of bounds for {len} periods")]
    RangeOutOfBounds { first: usize, last: usize, len: usize },

    #[error("run has no nonzero impulse")]
    NoImpulse,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
