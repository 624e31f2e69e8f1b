use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid time net: {0}")]
    InvalidNet(String),

    #[error("invalid mark: {0}")]
    InvalidMark(String),

    #[error("invalid interval ({s}, {t}]: {reason}")]
    InvalidInterval { s: f64, t: f64, reason: String },

    #[error("invalid kernel set: {0}")]
    InvalidKernel(String),

    #[error("not in D12 at truncation: level terms {level_terms:?} (top-level ratio {ratio:.3})")]
    NotInD12 { level_terms: Vec<f64>, ratio: f64 },

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("step too coarse: dt * L = {product:.4} >= 1 at step {step}; refine the net")]
    StepTooCoarse { step: usize, product: f64 },

    #[error("rank-deficient regression at step {step}: condition number {condition:.3e} over {basis_size} basis functions")]
    RankDeficient {
        step: usize,
        condition: f64,
        basis_size: usize,
    },

    #[error("fixed point did not converge at step {step}: residual {residual:.3e}")]
    NoConvergence { step: usize, residual: f64 },

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("missing input: {0}")]
    Missing(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
