use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image dimensions {height}x{width} are not divisible by 2^{levels}")]
    DimensionNotDivisible {
        height: usize,
        width: usize,
        levels: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("wrong potential kind: expected {expected}, got {actual}")]
    WrongKind {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("malformed tree: {0}")]
    MalformedTree(String),
    #[error("non-finite value in {stage}: {detail}")]
    NonFinite { stage: &'static str, detail: String },
    #[error("problem too large for dense evaluation (n = {0})")]
    TooLarge(usize),
    #[error("unsupported image: {0}")]
    UnsupportedImage(String),
    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
