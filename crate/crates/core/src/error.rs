use thiserror::Error;

use crate::grid::GridId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("scale {scale} outside grid range [{min}, {max}]")]
    ScaleOutOfRange { scale: i32, min: i32, max: i32 },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid goodness parameters: {0}")]
    InvalidGoodness(String),

    #[error("goodness undecidable at this window: cube at scale {scale} has {available} finer shift levels, runs need at least {needed}")]
    Undecidable { scale: i32, available: i32, needed: u32 },

    #[error("cube is not contained in the reference cube")]
    NotContained,

    #[error("cubes belong to different grids ({0:?} vs {1:?})")]
    GridMismatch(GridId, GridId),

    #[error("cube lies outside the window")]
    OutsideWindow,

    #[error("cube at the finest scale has no Haar difference")]
    FinestScale,

    #[error("geometry mismatch between operands")]
    GeometryMismatch,

    #[error("stopping family is not pairwise disjoint")]
    OverlappingFamily,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("support precondition violated: {0}")]
    Support(String),

    #[error("function takes negative values")]
    Negative,

    #[error("offset {offset} exceeds mesh depth {depth}")]
    OffsetTooLarge { offset: u32, depth: u32 },

    #[error("average of |f| vanishes on the stopping cube; coefficients undefined")]
    DegenerateCorona,

    #[error("threshold doubling exceeded {0} steps")]
    DoublingExhausted(u32),

    #[error("sparse form vanishes while the bilinear form is {0:e}")]
    VanishingSparseForm(f64),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
