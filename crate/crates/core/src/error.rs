use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),

    #[error("label file {path}: row for {image} has {ones} one-hot flags set, expected exactly 1")]
    AmbiguousLabel {
        path: PathBuf,
        image: String,
        ones: usize,
    },

    #[error("label file {path}: {image} appears twice with different labels")]
    DuplicateLabelRow { path: PathBuf, image: String },

    #[error("label file {path}: header {header:?} matches no accepted label schema")]
    UnknownSchema { path: PathBuf, header: String },

    #[error("unknown class {0:?}")]
    UnknownClass(String),

    #[error("{path}: image is {width}x{height}, both sides must be at least 15 pixels")]
    ImageTooSmall {
        path: PathBuf,
        width: u32,
        height: u32,
    },

    #[error("{path}: cannot decode image: {message}")]
    DecodeFailure { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("fingerprint has {0} channel values, expected 675")]
    MalformedFingerprint(usize),

    #[error("no image could be fingerprinted")]
    NoFingerprints,

    #[error("threshold {0} is outside 1..=100")]
    InvalidThreshold(i64),

    #[error("group member {0} is not in the dataset index")]
    IndexMismatch(usize),

    #[error("destination {0} is not empty")]
    DestNotEmpty(PathBuf),

    #[error("kept file {0} is missing from the source tree")]
    MissingSource(PathBuf),

    #[error("cannot sample {requested} files from {available}")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("target difference {0} cannot be produced by integer channel offsets (need an integer in 0..=381)")]
    UnachievableTarget(f64),

    #[error("invalid plant spec: {0}")]
    InvalidPlant(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub(crate) fn read(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Read {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn write(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Write {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
