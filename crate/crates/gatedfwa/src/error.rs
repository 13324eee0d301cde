//! Crate-wide error type.

/// Errors surfaced by kernels, scans, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("dimension guard violated: {0}")]
    DimensionGuard(String),

    #[error("misaligned block grids: {0}")]
    MisalignedGrids(String),

    #[error("stale log-normalizer: row {row} reconstructs probability sum {sum}")]
    StaleLogNormalizer { row: usize, sum: f64 },

    #[error("sequence length {n} exceeds cap {cap}")]
    SequenceCap { n: usize, cap: usize },

    #[error("fixture: {0}")]
    Fixture(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
