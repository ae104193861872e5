//! Error type shared by every module of the core crate.

use thiserror::Error;

/// Failures raised by the model, the integrators, the optimizer and the analysis layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {constraint} (got {value})")]
    InvalidParameter {
        field: &'static str,
        constraint: &'static str,
        value: f64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("supply {supply} fell below the floor {floor}")]
    SupplyFloor { supply: f64, floor: f64 },

    #[error("locked collateral is zero; thresholds are undefined")]
    DegenerateCollateral,

    #[error("exhaustion threshold solve did not converge: {0}")]
    ThresholdSolve(String),

    #[error("integration reached depth limit with error {achieved:e} above tolerance {requested:e}")]
    IntegrationAccuracy { achieved: f64, requested: f64 },

    #[error("speculator is insolvent: {0}")]
    Insolvent(String),

    #[error("objective is not concave here: second derivative {value:e}")]
    ConcavityViolation { value: f64 },

    #[error("sensitivity undefined: {0}")]
    SensitivityUndefined(String),

    #[error("bound not applicable: {0}")]
    BoundInapplicable(String),

    #[error("root finder failed: {0}")]
    Solver(String),

    #[error("conditional expectations unavailable: {0}")]
    DetectorUnavailable(String),

    #[error("regime comparison precondition failed: {0}")]
    RegimeCompare(String),
}

pub type Result<T> = std::result::Result<T, Error>;
