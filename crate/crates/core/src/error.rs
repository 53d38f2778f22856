use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {rows}x{cols} is not divisible by factor {factor}")]
    DimensionNotDivisible {
        rows: usize,
        cols: usize,
        factor: usize,
    },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("geometry mismatch: {0}")]
    GeoMismatch(String),

    #[error("value {value} at cell ({row}, {col}) is outside the valid range [{min}, {max}]")]
    ValueOutOfRange {
        row: usize,
        col: usize,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("parse error on line {line}: {message}")]
    ParseLine { line: usize, message: String },

    #[error("guide has no jointly valid cell")]
    EmptyGuide,

    #[error("patch {patch_h}x{patch_w} does not fit raster {n_rows}x{n_cols}")]
    PatchTooLarge {
        n_rows: usize,
        n_cols: usize,
        patch_h: usize,
        patch_w: usize,
    },

    #[error("window {row0},{col0} {height}x{width} is outside raster {n_rows}x{n_cols}")]
    OutOfBounds {
        row0: usize,
        col0: usize,
        height: usize,
        width: usize,
        n_rows: usize,
        n_cols: usize,
    },

    #[error("plan has {windows} windows but {patches} patches were supplied")]
    PlanMismatch { windows: usize, patches: usize },

    #[error("non-finite value encountered at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("sample is empty")]
    EmptySample,

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
