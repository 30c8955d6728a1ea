use crate::measure::Ball;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid polyline: {0}")]
    InvalidPolyline(String),

    #[error("invalid ball: radius {0} (must be positive and finite)")]
    InvalidBall(f64),

    #[error("invalid scale range: [{0}, {1}] (need 0 < r_min < r_max)")]
    InvalidRange(f64, f64),

    #[error("no atoms inside ball centered {center:?} radius {radius}")]
    EmptyBall { center: Vec<f64>, radius: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unknown cell id {0}")]
    UnknownCell(usize),

    #[error("exact curvature on {n} atoms exceeds the {limit}-atom cap; pass force=true or use sampled mode")]
    TripleCountCap { n: usize, limit: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn empty_ball(b: &Ball) -> Self {
        Error::EmptyBall {
            center: b.center.coords.clone(),
            radius: b.radius,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
