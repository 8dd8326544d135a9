use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension {0}: need D >= 2")]
    InvalidDimension(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not Hermitian (defect {0:.3e})")]
    NotHermitian(f64),

    #[error("trace is {0}, expected 1")]
    BadTrace(f64),

    #[error("observable is not traceless (tr X = {0:.3e})")]
    NotTraceless(f64),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotPositive(f64),

    #[error("matrix is not unitary (defect {0:.3e})")]
    NotUnitary(f64),

    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),

    #[error(
        "state lost positivity at step {step} (min eigenvalue {min_eigenvalue:.3e}); \
         reduce dt"
    )]
    PositivityViolation { step: usize, min_eigenvalue: f64 },

    #[error("population clipping removed {mass:.3e} probability in one step; reduce dt")]
    ExcessiveClipping { mass: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no bundled unitary 2-design for D = {0}")]
    UnsupportedDesign(usize),

    #[error("closed form is singular for D = {0}")]
    SingularFormula(usize),

    #[error("refusing to enumerate {dim}! permutations (limit D <= {limit})")]
    FactorialGuard { dim: usize, limit: usize },

    #[error("curve never reaches target {target}")]
    NoCrossing { target: f64 },

    #[error("measurement record is corrupt: {0}")]
    RecordCorrupt(String),

    #[error("{excluded} of {total} trajectories aborted (limit 1%); first failure: {first}")]
    TooManyExclusions {
        excluded: usize,
        total: usize,
        first: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
