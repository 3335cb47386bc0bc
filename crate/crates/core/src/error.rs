use std::path::PathBuf;

/// Errors raised by the toolkit.
///
/// Every variant maps onto a stable, machine-readable category string via
/// [`Error::category`]; the CLI prints that category on stderr.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("area of interest does not overlap the raster extent")]
    NoOverlap,
    #[error("CRS mismatch: expected `{expected}`, found `{found}`")]
    CrsMismatch { expected: String, found: String },
    #[error("grid geometry mismatch: {0}")]
    GridMismatch(String),
    #[error("land-cover code {0} is not part of the scheme")]
    UnknownCode(u32),
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("empty patch set")]
    EmptySet,
    #[error("empty area of interest")]
    EmptyAoi,
    #[error("bad split fractions: {0}")]
    BadFractions(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("model has no land-cover head")]
    NoLcHead,
    #[error("multi-task loss requires land-cover outputs and targets")]
    MissingLc,
    #[error("transform requires a square patch, got {height}x{width}")]
    NonSquare { height: usize, width: usize },
    #[error("unknown transform `{0}`")]
    UnknownTransform(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NanLoss { epoch: usize, step: usize, detail: String },
    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn category(&self) -> &'static str {
        match self {
            Error::NoOverlap => "NO_OVERLAP",
            Error::CrsMismatch { .. } => "CRS_MISMATCH",
            Error::GridMismatch(_) => "GRID_MISMATCH",
            Error::UnknownCode(_) => "UNKNOWN_CODE",
            Error::InvalidRaster(_) => "INVALID_RASTER",
            Error::Io { .. } => "IO_ERROR",
            Error::UnsupportedFormat(_) => "UNSUPPORTED_FORMAT",
            Error::EmptySet => "EMPTY_SET",
            Error::EmptyAoi => "EMPTY_AOI",
            Error::BadFractions(_) => "BAD_FRACTIONS",
            Error::BadConfig(_) => "BAD_CONFIG",
            Error::Shape(_) => "SHAPE_ERROR",
            Error::NonFiniteInput => "NONFINITE_INPUT",
            Error::NoLcHead => "NO_LC_HEAD",
            Error::MissingLc => "MISSING_LC",
            Error::NonSquare { .. } => "NON_SQUARE",
            Error::UnknownTransform(_) => "UNKNOWN_TRANSFORM",
            Error::NanLoss { .. } => "NAN_LOSS",
            Error::EmptyDataset(_) => "EMPTY_DATASET",
            Error::Tensor(_) => "TENSOR_ERROR",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
