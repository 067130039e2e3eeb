use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("integration failed at t = {time}: {reason}")]
    Integration { time: f64, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("exclusion `{0}` does not name a monomial of the dictionary")]
    UnknownExclusion(String),

    #[error("dictionary has no coordinate observables; {0}")]
    MissingCoordinates(&'static str),

    #[error(
        "Gram matrix is numerically singular (rank {rank} of {n}, condition {condition:.3e}); \
         use a positive ridge or a smaller dictionary"
    )]
    SingularGram { rank: usize, n: usize, condition: f64 },

    #[error("reconstruction degenerate: denominator component `{component}` = {value:e}")]
    DegenerateReconstruction { component: String, value: f64 },

    #[error("closest-point projection did not converge (residual {residual:e}) at lifted point {point:?}")]
    ProjectionFailed { residual: f64, point: Vec<f64> },

    #[error("{dropped} of {total} snapshot points left the domain")]
    TooManyDropped { dropped: usize, total: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
