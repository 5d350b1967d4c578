use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {0}")]
    BadMagic(String),

    #[error("unsupported format version {found} in {what}")]
    UnsupportedVersion { what: String, found: u16 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("duplicate patient_id: {0}")]
    DuplicatePatient(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("malformed csv: {0}")]
    Csv(String),

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("no signal: {0}")]
    NoSignal(String),

    #[error("insufficient tissue: {0}")]
    InsufficientTissue(String),

    #[error("degenerate stain: {0}")]
    DegenerateStain(String),

    #[error("site dominates: {0}")]
    SiteDominates(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("degenerate class weights: {0}")]
    DegenerateClassWeights(String),

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("single-class input: {0}")]
    SingleClass(String),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("degenerate range: {0}")]
    DegenerateRange(String),

    #[error("rank-deficient: {0}")]
    RankDeficient(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
