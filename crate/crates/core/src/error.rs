use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric fault in {what} (index {index})")]
    NumericFault { what: String, index: usize },

    #[error("invalid camera pose: {0}")]
    InvalidPose(String),

    #[error("direction is not unit length (norm {norm})")]
    InvalidDirection { norm: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("stale state: {0}")]
    StaleState(String),

    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    ImageTooSmall { width: usize, height: usize, window: usize },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training aborted after {0} consecutive numeric faults")]
    TrainingAborted(usize),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint body checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest not found: {0}")]
    MissingManifest(PathBuf),
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },
    #[error("cannot read image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("cannot write image {path}: {reason}")]
    ImageWrite { path: PathBuf, reason: String },
    #[error("frame {frame}: pose is not rigid ({reason})")]
    NonRigidPose { frame: String, reason: String },
    #[error("frame {frame}: resolution {found:?} does not match {expected:?}")]
    ResolutionMismatch {
        frame: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
    #[error("dataset has no training views")]
    EmptyDataset,
    #[error("frame ids differ: missing from prediction {missing_pred:?}, missing from target {missing_target:?}")]
    FrameIdMismatch {
        missing_pred: Vec<String>,
        missing_target: Vec<String>,
    },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("invalid value for `{key}`: {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("unknown preset `{0}` (expected toy, small or paper)")]
    UnknownPreset(String),
    #[error("cannot parse config: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(what: impl Into<String>, index: usize) -> Self {
        Error::NumericFault {
            what: what.into(),
            index,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::NumericFault { .. } | Error::TrainingAborted(_) => 3,
            _ => 2,
        }
    }
}
