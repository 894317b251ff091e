use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Se3Error {
    #[error("rotation is not orthonormal (|R^T R - I| = {orthogonality:e}, det = {determinant})")]
    InvalidRotation { orthogonality: f64, determinant: f64 },
    #[error("trajectory needs at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("invalid time step {0}")]
    InvalidStep(f64),
    #[error("trajectories do not meet at the junction pose")]
    PoseMismatch,
    #[error("time steps differ: {0} vs {1}")]
    StepMismatch(f64, f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid object model: {0}")]
    InvalidObject(String),
    #[error("invalid contact surface {id}: {reason}")]
    InvalidSurface { id: usize, reason: String },
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),
    #[error("invalid robot model: {0}")]
    InvalidRobot(String),
    #[error("object corner penetrates the plane by {depth:.4} m at sample {sample}")]
    Penetration { sample: usize, depth: f64 },
    #[error("{kind} parameter out of range: {reason}")]
    ParamOutOfRange { kind: String, reason: String },
    #[error(transparent)]
    Trajectory(#[from] Se3Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("cost matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("cost matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("non-finite problem data")]
    NonFinite,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoptError {
    #[error("schedule violates {0}")]
    InvalidSchedule(String),
    #[error("{step} subproblem is infeasible at iteration {iteration}")]
    Infeasible { step: &'static str, iteration: usize },
    #[error("{step} subproblem did not converge at iteration {iteration}")]
    NotConverged { step: &'static str, iteration: usize },
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("no feasible contact schedule within {evaluations} evaluations")]
    BudgetExhausted { evaluations: usize },
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("no samples with positive value to train on")]
    EmptyPositiveSet,
    #[error("classifier needs both feasible and infeasible samples")]
    SingleClass,
    #[error("model does not match the problem: {0}")]
    Incompatible(String),
    #[error("malformed model file: {0}")]
    Format(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JobError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

impl JobError {
    /// True when the request itself is malformed, as opposed to a job that
    /// ran and could not produce a result.
    pub fn is_input_error(&self) -> bool {
        match self {
            Self::Invalid(_) | Self::Scene(_) => true,
            Self::Search(e) => matches!(e, SearchError::InvalidConfig(_) | SearchError::Scene(_)),
            Self::Learn(e) => matches!(e, LearnError::Format(_) | LearnError::Incompatible(_)),
        }
    }
}
