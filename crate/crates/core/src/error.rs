use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("NonSquare: matrix is {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("NotSymmetric: max asymmetry {0:e}")]
    NotSymmetric(f64),

    #[error("NonFinite: {0}")]
    NonFinite(&'static str),

    #[error("RankDeficient: row {row} has residual norm {residual:e}")]
    RankDeficient { row: usize, residual: f64 },

    #[error("ZeroDimension: {0} must be at least 1")]
    ZeroDimension(&'static str),

    #[error("DimensionMismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("EmptyClassSet: no text features to classify against")]
    EmptyClassSet,

    #[error("NonPositiveTau: temperature {0} must be > 0")]
    NonPositiveTau(f64),

    #[error("EmptyBatch: no training samples")]
    EmptyBatch,

    #[error("LabelOutOfRange: label {label} with {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("LengthMismatch: {targets} target classes but {teachers} teacher features")]
    LengthMismatch { targets: usize, teachers: usize },

    #[error("EmptyTargets: no target classes for the feature loss")]
    EmptyTargets,

    #[error("NegativeLambda: loss weight {0} must be >= 0")]
    NegativeLambda(f64),

    #[error("EmptySplit: nothing to evaluate")]
    EmptySplit,

    #[error("WindowOutOfRange: window ({t1}, {t2}) with last epoch {last}")]
    WindowOutOfRange { t1: usize, t2: usize, last: usize },

    #[error("RankTooLarge: r = {r} but the window supports at most {max}")]
    RankTooLarge { r: usize, max: usize },

    #[error("InsufficientVariance: total variance {0:e}")]
    InsufficientVariance(f64),

    #[error("DimensionTooSmall: feature dimension {dim} but {needed} orthogonal directions are required")]
    DimensionTooSmall { dim: usize, needed: usize },

    #[error("ConfigInvalid: {0}")]
    ConfigInvalid(String),

    #[error("BadFormat: {path}: {msg}")]
    BadFormat { path: String, msg: String },

    #[error("IoFailure: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn bad_format(path: impl std::fmt::Display, msg: impl Into<String>) -> Self {
        Error::BadFormat {
            path: path.to_string(),
            msg: msg.into(),
        }
    }
}
