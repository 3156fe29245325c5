use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid depth {0}: must be positive")]
    InvalidDepth(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("degenerate ray geometry: {0}")]
    DegenerateRay(String),

    #[error("ambiguous sphere labeling (ratio margin {margin:.4})")]
    AmbiguousLabeling { margin: f64 },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("cannot initialize a scene from an empty point cloud")]
    EmptyInitialization,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("image {width}x{height} is smaller than the {window}px window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("refinement failed: {0}")]
    RefinementFailed(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("timestamp {0} has no scene")]
    TimestampMismatch(u32),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage {stage} failed [{code}]: {source}", code = source.code())]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidDepth(_) => "invalid_depth",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::InsufficientData(_) => "insufficient_data",
            Error::DegenerateConfiguration(_) => "degenerate_configuration",
            Error::DegenerateRay(_) => "degenerate_ray",
            Error::AmbiguousLabeling { .. } => "ambiguous_labeling",
            Error::Configuration(_) => "configuration",
            Error::EmptyInitialization => "empty_initialization",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::ImageTooSmall { .. } => "image_too_small",
            Error::RefinementFailed(_) => "refinement_failed",
            Error::Protocol(_) => "protocol",
            Error::TimestampMismatch(_) => "timestamp_mismatch",
            Error::Validation(_) => "validation",
            Error::Diverged { .. } => "diverged",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Stage { source, .. } => source.code(),
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    /// True for errors detected before any compute (bad inputs or config).
    pub fn is_validation(&self) -> bool {
        if let Error::Stage { source, .. } = self {
            return source.is_validation();
        }
        matches!(
            self,
            Error::Validation(_)
                | Error::Configuration(_)
                | Error::InvalidParameter(_)
                | Error::Json(_)
                | Error::Format { .. }
                | Error::TimestampMismatch(_)
        )
    }
}
