use thiserror::Error;

/// Errors produced across the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle {angle} rad is too close to pi for a unique logarithm")]
    AngleNearPi { angle: f64 },

    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("every node has zero confidence")]
    AllZeroConfidence,

    #[error("ray does not intersect the unit cube")]
    NoIntersection,

    #[error("field has no zero level set")]
    EmptyLevelSet,

    #[error("mixture has no positive weight")]
    DegenerateMixture,

    #[error("all rendering weights are zero")]
    AllZeroWeights,

    #[error("camera centers do not span a ring ({0})")]
    DegenerateRing(String),

    #[error("image pair ({i}, {j}) shares only {found} visible points")]
    InsufficientCovisibility { i: usize, j: usize, found: usize },

    #[error("point set is empty")]
    EmptyPointSet,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
