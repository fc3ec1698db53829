use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive definite{}", step.map(|s| format!(" at filter step {s}")).unwrap_or_default())]
    NotPositiveDefinite { step: Option<usize> },

    #[error("backward already ran on this tape; call reset_adjoints first")]
    BackwardTwice,

    #[error("backward root must be 1x1, got {0:?}")]
    NonScalarRoot((usize, usize)),

    #[error("subset condition violated: {0}")]
    SubsetCondition(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("parse error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<u64>, msg: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable kebab-case identifier of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::NotSymmetric(_) => "not-symmetric",
            Error::NotPositiveDefinite { .. } => "not-positive-definite",
            Error::BackwardTwice => "backward-twice",
            Error::NonScalarRoot(_) => "non-scalar-root",
            Error::SubsetCondition(_) => "subset-condition",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Divergence(_) => "divergence",
            Error::Version { .. } => "version",
            Error::Parse { .. } => "parse",
            Error::MissingColumn(_) => "missing-column",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attach a filter step index to a positive-definiteness failure.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::NotPositiveDefinite { step: None } => Error::NotPositiveDefinite { step: Some(step) },
            other => other,
        }
    }
}
