use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("channel {0} has zero variance")]
    ZeroVariance(usize),
    #[error("window [{start}, {end}] s exceeds record length {length} s")]
    OutOfBounds { start: f64, end: f64, length: f64 },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("unknown format version {0:?}")]
    UnknownVersion(String),
    #[error("malformed annotation at line {line}: {reason}")]
    MalformedAnnotation { line: usize, reason: String },
    #[error("overlap must lie in [0, 1), got {0}")]
    InvalidOverlap(f64),
    #[error("durations must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("cache does not belong to the current model state")]
    StaleCache,
    #[error("probability is NaN for default {0}")]
    DegenerateProbability(usize),
    #[error("sampling exhausted after {0} consecutive rejections")]
    SamplingExhausted(usize),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("record of {length} s is shorter than one {window} s window")]
    RecordTooShort { length: f64, window: f64 },
    #[error("no record with id {0:?}")]
    MissingRecord(String),
    #[error("event [{start}, {end}] s lies outside [0, {span}] s")]
    OutOfRange { start: f64, end: f64, span: f64 },
    #[error("could not place events without overlap after {0} attempts")]
    PlacementFailure(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ZeroVariance(_) => "ZeroVariance",
            Error::OutOfBounds { .. } => "OutOfBounds",
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::UnknownVersion(_) => "UnknownVersion",
            Error::MalformedAnnotation { .. } => "MalformedAnnotation",
            Error::InvalidOverlap(_) => "InvalidOverlap",
            Error::NonPositiveDuration(_) => "NonPositiveDuration",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonFiniteActivation(_) => "NonFiniteActivation",
            Error::StaleCache => "StaleCache",
            Error::DegenerateProbability(_) => "DegenerateProbability",
            Error::SamplingExhausted(_) => "SamplingExhausted",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::RecordTooShort { .. } => "RecordTooShort",
            Error::MissingRecord(_) => "MissingRecord",
            Error::OutOfRange { .. } => "OutOfRange",
            Error::PlacementFailure(_) => "PlacementFailure",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
