use thiserror::Error;

use crate::model::ValidationReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("model validation failed:\n{0}")]
    Validation(ValidationReport),

    #[error("{context}: matrix is singular or ill-conditioned (cond ≈ {cond:.2e})")]
    IllConditioned { context: &'static str, cond: f64 },

    #[error("evaluation point {point} is outside the admissible strip or at a pole")]
    OutsideStrip { point: String },

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("fixed points from distinct initializations disagree by {gap:.3e}")]
    AmbiguousFixedPoint { gap: f64 },

    #[error("grid too coarse: re-transform residual {residual:.2e} exceeds {tolerance:.2e}")]
    GridTooCoarse { residual: f64, tolerance: f64 },

    #[error("mean drift must be positive for infimum asymptotics (m1 = {m1:.6})")]
    NonpositiveDrift { m1: f64 },

    #[error("unsupported model for this operation: {0}")]
    Unsupported(String),

    #[error("tail exponent matrix has an eigenvalue with non-positive real part ({0:.3e}); model outside validity")]
    InvalidTailExponent(f64),

    #[error("extrapolation did not settle: successive estimates differ by {gap:.3e}")]
    ExtrapolationDiverged { gap: f64 },

    #[error("mismatched metadata between batch and analytic curves: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
