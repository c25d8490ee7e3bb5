use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("illegal label value {value} at pixel {index}")]
    IllegalLabelValue { value: u8, index: usize },

    #[error("probability {value} at pixel {index} is outside [0, 1]")]
    InvalidProbability { value: f64, index: usize },

    #[error("missing frame {expected} in {dir}")]
    MissingFrames { dir: PathBuf, expected: usize },

    #[error("frame {index} is {found:?} but earlier frames are {expected:?}")]
    MixedResolution {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("sequence has no frames")]
    EmptySequence,

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("patient {0} appears in more than one split")]
    PatientLeak(String),

    #[error("invalid split specification: {0}")]
    InvalidSplit(String),

    #[error("patch {patch}x{patch} does not fit in a {height}x{width} image")]
    PatchTooLarge {
        patch: usize,
        height: usize,
        width: usize,
    },

    #[error("ground truth contains a single class; AUC is undefined")]
    SingleClassGroundTruth,

    #[error("ground truth has no vessel component")]
    EmptyGroundTruth,

    #[error("cannot draw patches from an empty {0} pool")]
    EmptyPool(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported image {path}: {reason}")]
    UnsupportedImage { path: PathBuf, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
