use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid tensor on cell {cell}: {reason}")]
    InvalidTensor { cell: usize, reason: String },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("degenerate equilibrium: denominator {0} is not positive")]
    DegenerateEquilibrium(f64),

    #[error("separation violated: phi = {0} >= 1")]
    SeparationViolation(f64),

    #[error("linear solver failure: {0}")]
    SolverFailure(String),

    #[error("time step {step} failed: {reason}")]
    StepFailure { step: usize, reason: String },

    #[error("snapshot sequence is identically zero")]
    EmptySnapshots,

    #[error("sequence {sequence} has rank {rank} < required {required}")]
    RankDeficiency {
        sequence: String,
        rank: usize,
        required: usize,
    },

    #[error("DEIM selection failed at step {0}: singular interpolation matrix")]
    SelectionFailure(usize),

    #[error("reduced phi reaches {value} >= 1 at interpolation node {node}")]
    RomSeparation { node: usize, value: f64 },

    #[error("reduced Newton did not converge after {iterations} iterations (last increment {increment:e})")]
    NewtonDivergence { iterations: usize, increment: f64 },

    #[error("reduced step {step} failed: {source}")]
    RomStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("singular reduced system: {0}")]
    Singular(String),

    #[error("sensitivity system for parameter {param} is singular at step {step}")]
    SensitivityFailure { param: usize, step: usize },

    #[error("target has zero norm")]
    Normalization,

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("invalid therapy schedule: {0}")]
    Schedule(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn json(path: &std::path::Path, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.display().to_string(),
            source,
        }
    }

    /// Errors a caller can recover from by shrinking a step or a trial point.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::SeparationViolation(_)
                | Error::SolverFailure(_)
                | Error::StepFailure { .. }
                | Error::RomSeparation { .. }
                | Error::NewtonDivergence { .. }
                | Error::RomStep { .. }
                | Error::Singular(_)
                | Error::SensitivityFailure { .. }
                | Error::SelectionFailure(_)
                | Error::RankDeficiency { .. }
        )
    }

    /// Process exit status for the error family: 2 for input and schema
    /// problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        let numerical = matches!(
            self,
            Error::DegenerateEquilibrium(_) | Error::EmptySnapshots | Error::Normalization
        );
        if numerical || self.is_solver_failure() {
            3
        } else {
            2
        }
    }
}
