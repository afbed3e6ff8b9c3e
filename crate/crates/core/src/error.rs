use autoalign_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("point is behind the camera (depth {depth:.3e})")]
    BehindCamera { depth: f64 },
    #[error("degenerate box: {0}")]
    DegenerateBox(String),
    #[error("rotated boxes are not supported (yaw {0})")]
    UnsupportedRotation(f64),
    #[error("could not place {requested} objects without overlap after {attempts} attempts")]
    Placement { requested: usize, attempts: usize },
    #[error("parse error in {file}: {field}: {msg}")]
    Parse {
        file: String,
        field: String,
        msg: String,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),
    #[error("diagnostic unsupported: {0}")]
    UnsupportedDiagnostic(String),
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<AlignError>,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AlignError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short stable identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Tensor(_) => "tensor",
            Self::BehindCamera { .. } => "behind_camera",
            Self::DegenerateBox(_) => "degenerate_box",
            Self::UnsupportedRotation(_) => "unsupported_rotation",
            Self::Placement { .. } => "placement",
            Self::Parse { .. } => "parse",
            Self::Config(_) => "config",
            Self::EmptyBatch(_) => "empty_batch",
            Self::UnsupportedDiagnostic(_) => "unsupported_diagnostic",
            Self::MissingGradient(_) => "missing_gradient",
            Self::MissingParam(_) => "missing_param",
            Self::Dimension(_) => "dimension",
            Self::AtStep { source, .. } => source.kind(),
            Self::Io { .. } => "io",
            Self::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, AlignError>;
