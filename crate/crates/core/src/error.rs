use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("time {t} outside [{t0}, {horizon}]")]
    OutOfRange { t: f64, t0: f64, horizon: f64 },

    #[error("invalid density: {0}")]
    InvalidDensity(String),

    #[error("undefined measure: {0}")]
    UndefinedMeasure(String),

    #[error("unsupported dimension {dim}: {hint}")]
    UnsupportedDimension { dim: usize, hint: String },

    #[error("resolution: {0}")]
    Resolution(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("sampler could not produce a density with Hölder probe <= {radius}")]
    Sampler { radius: f64 },

    #[error("CFL violation: {measure:.4} > 1, suggested dt <= {suggested_dt:.3e}")]
    Cfl { measure: f64, suggested_dt: f64 },

    #[error("maximum principle violated at step {step}: {value:.6e} > bound {bound:.6e}")]
    MaximumPrinciple { step: usize, value: f64, bound: f64 },

    #[error("mass conservation fault at step {step}: drift {drift:.3e}")]
    Conservativity { step: usize, drift: f64 },

    #[error("fixed point did not converge in {iterations} iterations (last residual {residual:.3e})")]
    Divergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("memory budget exceeded: {required_bytes} bytes requested; try N={suggested_players}, M={suggested_points}")]
    MemoryBudget {
        required_bytes: u128,
        suggested_players: usize,
        suggested_points: usize,
    },

    #[error("drift evaluation failed at replica {replica}, player {player}, step {step}: {reason}")]
    Drift {
        replica: usize,
        player: usize,
        step: usize,
        reason: String,
    },

    #[error("ensembles are not coupled: {0}")]
    Coupling(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("integrity: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
