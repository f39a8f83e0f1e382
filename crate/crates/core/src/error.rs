use thiserror::Error;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Degenerate,
    NonConvergence,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate projection: point lies on the camera principal plane")]
    DegenerateProjection,
    #[error("singular camera: left 3x3 block of the projection matrix is singular")]
    SingularCamera,
    #[error("invalid camera pose: {0}")]
    InvalidPose(String),
    #[error("no ground-classified points in cloud")]
    NoGroundPoints,
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("empty segment")]
    EmptySegment,
    #[error("largest segment is not uniquely dominant")]
    AmbiguousLargest,
    #[error("too few matches: need at least {needed}, got {got}")]
    TooFewMatches { needed: usize, got: usize },
    #[error("too few correspondences: need at least {needed}, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("no visible points: every point projects outside the frame")]
    NoVisiblePoints,
    #[error("raster frames do not match")]
    FrameMismatch,
    #[error("distribution is not normalized (sum = {0})")]
    NotNormalized(f64),
    #[error("degenerate entropy: joint entropy is zero")]
    DegenerateEntropy,
    #[error("frame {rows}x{cols} is smaller than one patch")]
    FrameTooSmall { rows: usize, cols: usize },
    #[error("propagation did not converge within {iterations} iterations")]
    NotConverged { iterations: usize },
    #[error("empty patch cloud")]
    EmptyPatchCloud,
    #[error("empty input set")]
    EmptySet,
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("unknown building id {0}")]
    UnknownBuilding(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::InvalidSpec(_)
            | Error::Parse { .. }
            | Error::InvalidPose(_) => ErrorClass::Config,
            Error::Io(_) | Error::Image(_) => ErrorClass::Io,
            Error::NotConverged { .. } => ErrorClass::NonConvergence,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Degenerate,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
