use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("could not decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed csv in {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("raster {slide_id}: expected {expected} bytes for {width}x{height} RGB, got {actual}")]
    RasterSize {
        slide_id: String,
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },

    #[error("mask is {mask_width}x{mask_height} but raster is {width}x{height}")]
    MaskSize {
        width: usize,
        height: usize,
        mask_width: usize,
        mask_height: usize,
    },

    #[error("slide {slide_id}: every patch was filtered out")]
    EmptySlide { slide_id: String },

    #[error("feature matrix contains a non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("feature matrix shape {rows}x{cols} is invalid (both must be at least 1)")]
    EmptyMatrix { rows: usize, cols: usize },

    #[error("feature matrix holds {actual} values, expected {rows}x{cols}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        actual: usize,
    },

    #[error("bad magic in {path}: expected FVEC1")]
    BadMagic { path: PathBuf },

    #[error("truncated payload in {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path} has {extra} unexpected trailing bytes")]
    TrailingBytes { path: PathBuf, extra: usize },

    #[error("dimension mismatch: {context} has dim {found}, expected {expected}")]
    DimMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("manifest for {slide_id} lists {keys} patch keys but the matrix has {rows} rows")]
    RowCountMismatch {
        slide_id: String,
        keys: usize,
        rows: usize,
    },

    #[error("no feature files found in {path}")]
    EmptyCohort { path: PathBuf },

    #[error("cohort mixes feature dimensions: {dims:?}")]
    MixedDims { dims: Vec<usize> },

    #[error("slide {slide_id} has no label")]
    MissingLabel { slide_id: String },

    #[error("cannot fit k={k} clusters to {n} points")]
    InvalidK { k: usize, n: usize },

    #[error("elbow selection needs at least 3 curve points, got {0}")]
    CurveTooShort(usize),

    #[error("class {class} has {count} slides; at least 2 are required to split")]
    ClassTooSmall { class: usize, count: usize },

    #[error("confusion matrix is empty")]
    EmptyConfusion,

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver: 1 usage/IO, 2 data quality,
    /// 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::EmptySlide { .. }
            | Error::InvalidK { .. }
            | Error::NonFinite { .. }
            | Error::EmptyMatrix { .. }
            | Error::EmptyCohort { .. }
            | Error::MissingLabel { .. }
            | Error::ClassTooSmall { .. }
            | Error::CurveTooShort(_)
            | Error::EmptyConfusion => 2,
            Error::Divergence { .. } => 3,
            _ => 1,
        }
    }
}
