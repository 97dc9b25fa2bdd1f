use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("shape mismatch: expected {expected} samples, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("singular point: {0}")]
    Singular(String),

    #[error("density sample {index} = {value} lies outside [0, 1]")]
    PauliViolation { index: usize, value: f64 },

    #[error("linear solver stalled after {iterations} iterations (relative residual {residual:e})")]
    LinearSolver { iterations: usize, residual: f64 },

    #[error("picard iteration hit the cap of {} iterations; residual history {residuals:?}", .residuals.len())]
    PicardNotConverged { residuals: Vec<f64> },

    #[error("degenerate envelope fit: {0}")]
    DegenerateFit(String),

    #[error("transport leaked mass {leaked:e} through the truncated box")]
    MassLeak { leaked: f64 },

    #[error("snapshot checksum mismatch")]
    ChecksumMismatch,

    #[error("unsupported snapshot version {0}")]
    SnapshotVersion(u32),

    #[error("malformed snapshot: {0}")]
    MalformedSnapshot(String),

    #[error("malformed diagnostics series: {0}")]
    MalformedSeries(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing data: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by the inputs rather than by the computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidGrid(_)
                | Error::InvalidParameter { .. }
                | Error::Config(_)
                | Error::Missing(_)
                | Error::SnapshotVersion(_)
                | Error::MalformedSnapshot(_)
                | Error::MalformedSeries(_)
                | Error::ChecksumMismatch
                | Error::ShapeMismatch { .. }
        )
    }

    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
