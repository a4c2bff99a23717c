//! Error type shared across the simulation engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid force law: {0}")]
    InvalidForceLaw(String),

    #[error("distance must be finite and non-negative, got {0}")]
    InvalidDistance(f64),

    #[error("invalid population: {0}")]
    InvalidPopulation(String),

    #[error("cells {i} and {j} have coincident centers; interaction direction is undefined")]
    CoincidentCenters { i: usize, j: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("population is empty")]
    EmptyPopulation,

    #[error("dense materialization limited to {limit} cells, population has {n}")]
    DenseTooLarge { n: usize, limit: usize },

    #[error("step size underflow at t = {t}: dt = {dt}")]
    StepUnderflow { t: f64, dt: f64 },

    #[error("non-finite coordinates at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("query time {t} outside trajectory range [{t0}, {t1}]")]
    Extrapolation { t: f64, t0: f64, t1: f64 },

    #[error("trajectories have different cell counts ({a} vs {b}); errors are only defined on windows with constant population")]
    PopulationMismatch { a: usize, b: usize },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("division target cell {0} does not exist")]
    NoSuchCell(u64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("scenario file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
}
