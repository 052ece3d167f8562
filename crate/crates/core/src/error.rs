use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-scalar loss with shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("empty reference pool for split {0}")]
    EmptyPool(String),
    #[error("split leakage: {0}")]
    Leakage(String),
    #[error("frozen weights: {0}")]
    Frozen(String),
    #[error("context overflow: sequence of {len} exceeds context {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("degenerate samples: both variances are zero")]
    DegenerateSamples,
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("missing {0}")]
    Missing(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short stable identifier used in machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Invalid(_) => "invalid",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::EmptyPool(_) => "empty_pool",
            Error::Leakage(_) => "leakage",
            Error::Frozen(_) => "frozen",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::DegenerateSamples => "degenerate_samples",
            Error::Config(_) => "config",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Missing(_) => "missing",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
