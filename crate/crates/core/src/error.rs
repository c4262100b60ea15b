use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("funnel radius is not positive (inf = {inf})")]
    NonPositiveFunnel { inf: f64 },
    #[error("(alpha, beta) = ({alpha}, {beta}) violate the funnel growth condition at t = {t}")]
    InadmissibleConstants { alpha: f64, beta: f64, t: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("initial error outside auxiliary funnel {index}")]
    InitialErrorOutsideFunnel { index: usize },
    #[error("funnel controller error e_{index} left the unit ball")]
    DomainViolation { index: usize },
    #[error("non-finite value during integration at t = {t}")]
    NonFinite { t: f64 },
    #[error("step {h} does not divide the partition cell [{a}, {b})")]
    StepIncompatibleWithPartition { h: f64, a: f64, b: f64 },
    #[error("trace {index} does not start where the previous one ended")]
    TimeMismatch { index: usize },
    #[error("input map is not positive definite at a sampled state")]
    NotPositiveDefinite,
    #[error("input map is singular")]
    SingularG,
    #[error("warm start has infinite cost")]
    NoFeasiblePoint,
    #[error("model prediction left the funnel at t = {t}")]
    PredictionOutsideFunnel { t: f64 },
    #[error("data-driven input exceeds its bound ({norm} > {bound})")]
    DataInputTooLarge { norm: f64, bound: f64 },
    #[error("measurement at t = {t} is outside the admissible initialisation envelope")]
    MeasurementOutsideEnvelope { t: f64 },
    #[error("learner returned parameters outside the admissible set: {reason}")]
    LearnerReturnedInfeasibleModel { reason: String },
    #[error("parameter projection failed: {reason}")]
    InfeasibleProjection { reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}
