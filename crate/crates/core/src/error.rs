use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("time {time} is not a grid point (bracketed by {below} and {above})")]
    OffGrid { time: f64, below: f64, above: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("horizontal extension past the horizon: t + h = {target} > T = {horizon}")]
    PastHorizon { target: f64, horizon: f64 },

    #[error("no forward room for a horizontal derivative at the last grid point")]
    NoForwardRoom,

    #[error("non-finite functional value at bump {bump:?}")]
    NonFiniteDerivative { bump: Vec<f64> },

    #[error("non-finite {what} at path {path}, time {time}")]
    NonFiniteCoefficient { what: &'static str, path: usize, time: f64 },

    #[error("non-finite driver value at t = {t}, y = {y}")]
    NonFiniteDriver { t: f64, y: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("root finding failed at step {step}, path {path}: residual {residual:e} after {iterations} iterations")]
    RootFind { step: usize, path: usize, residual: f64, iterations: usize },

    #[error("rank-deficient regression at step {step}; increase the ridge weight")]
    RankDeficient { step: usize },

    #[error("ODE integration failed at t = {t}: {reason}")]
    Stiffness { t: f64, reason: String },

    #[error("rho = {rho} outside the admissible range ({lower}, 1)")]
    RhoOutOfRange { rho: f64, lower: f64 },

    #[error("singular stratum too thin: mass {mass} below {required}")]
    ThinStratum { mass: f64, required: f64 },

    #[error("test function support [{lo}, {hi}] is not compactly inside the finite region")]
    SupportOverlap { lo: f64, hi: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error("missing input file {0}")]
    MissingInput(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
