use std::path::PathBuf;

use thiserror::Error;

use crate::volio::Grid;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed volume data: {0}")]
    Format(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("label value {value} is out of range for {num_labels} labels")]
    LabelRange { value: u32, num_labels: u32 },

    #[error("invalid volume header: {0}")]
    InvalidHeader(String),

    #[error("non-finite voxel value at index {index}")]
    NonFiniteVoxel { index: usize },

    #[error("probability value {value} at index {index} is outside [0, 1]")]
    ProbabilityRange { index: usize, value: f32 },

    #[error("mask value {value} at index {index} is not binary")]
    NonBinaryMask { index: usize, value: f32 },

    #[error("grid mismatch: expected {expected}, found {found}")]
    GridMismatch { expected: Grid, found: Grid },

    #[error("label count mismatch: expected {expected}, found {found}")]
    LabelCountMismatch { expected: u16, found: u16 },

    #[error("population is empty or too small: {0}")]
    EmptyPopulation(String),

    #[error("region {0} is not present")]
    RegionMissing(u16),

    #[error("region {region} exposes {available} boundary faces, need {requested}")]
    InsufficientSurface {
        region: u16,
        available: usize,
        requested: usize,
    },

    #[error("vertex correspondence error: {0}")]
    Correspondence(String),

    #[error("clustering failed{}: {reason}", region.map(|k| format!(" for region {k}")).unwrap_or_default())]
    ClusteringFailed { region: Option<u16>, reason: String },

    #[error("cluster has no members")]
    EmptyCluster,

    #[error("correlation support has {0} voxels, need at least 2")]
    DegenerateSupport(usize),

    #[error("zero variance over the correlation support")]
    ZeroVariance,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("only {0} nonzero paired differences, need at least 6")]
    InsufficientPairs(usize),

    #[error("phantom layout error: {0}")]
    Layout(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn grid(expected: &Grid, found: &Grid) -> Self {
        Error::GridMismatch {
            expected: expected.clone(),
            found: found.clone(),
        }
    }
}
