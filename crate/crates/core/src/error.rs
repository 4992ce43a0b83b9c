use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model must have exactly 7 joints, found {0}")]
    JointCount(usize),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("model file parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("numerical blow-up at t = {time:.4} s ({what})")]
    NumericalBlowup { time: f64, what: &'static str },
    #[error("deformable wall spacing {spacing} does not divide dimension {dim}")]
    InvalidTessellation { spacing: f64, dim: f64 },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("decision dimension {got} does not match bounds dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("every candidate rollout failed: {0}")]
    Failure(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("no reachable target after {0} samples")]
    UnreachableTarget(usize),
    #[error("ball placement failed after {0} tries")]
    PlacementFailure(usize),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("no joint configuration reaches the goal")]
    IkFailure,
    #[error("start configuration is in collision")]
    StartInCollision,
    #[error("no collision-free path: {0}")]
    Failure(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config error at `{location}`: {message}")]
    Invalid { location: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ConfigError {
    pub fn at(location: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid { location: location.into(), message: message.into() }
    }
}

/// Crate-level error for the experiment runner and CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
