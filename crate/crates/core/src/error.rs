use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A query row with every key masked out.
    #[error("empty attention row (query {row})")]
    EmptyAttentionRow { row: usize },

    #[error("degenerate stride: tau={tau} exceeds min(h={h}, w={w})")]
    DegenerateStride { tau: usize, h: usize, w: usize },

    #[error("sampling/pattern mismatch: {pattern} pattern cannot be probed with {sampling} sampling")]
    SamplingPatternMismatch {
        pattern: &'static str,
        sampling: &'static str,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter {
        name: &'static str,
        reason: &'static str,
    },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: &'static str) -> Self {
        Error::InvalidParameter { name, reason }
    }
}
