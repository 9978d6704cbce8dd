use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Network or experiment configuration is inconsistent (bad hyperparameters,
    /// shape chains that do not line up, invalid thresholds).
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was driven in the wrong order, e.g. backward before forward.
    #[error("usage error: {0}")]
    Usage(String),

    /// Manifests, annotation files, CSVs or images that violate their contract.
    #[error("data error: {0}")]
    Data(String),

    /// Loss or activations stopped being finite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A region of interest does not touch the feature map at all.
    #[error("ROI {index} ({roi}) lies entirely outside the {height}x{width} feature map")]
    RoiOutside {
        index: usize,
        roi: String,
        height: usize,
        width: usize,
    },

    #[error("average precision is undefined without non-difficult ground truth")]
    UndefinedAp,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::RoiOutside { .. } => 3,
            Error::Numeric(_) => 4,
            Error::UndefinedAp => 3,
        }
    }
}
