use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {message}")]
    Annotation {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("image {image_id}: box {index} ({x}, {y}, {w}, {h}) is invalid or outside {width}x{height}")]
    BoxOutOfBounds {
        image_id: String,
        index: usize,
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        width: usize,
        height: usize,
    },
    #[error("image codec: {0}")]
    Codec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("average precision is undefined without ground-truth boxes")]
    NoGroundTruth,
    #[error("counting errors need at least one record")]
    EmptyRecords,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(
        "could not place {requested} objects in image {image_index} after {attempts} attempts; \
         lower objects_per_image or object_size, or raise max_pairwise_iou"
    )]
    SceneTooDense {
        image_index: usize,
        requested: usize,
        attempts: usize,
    },
    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Divergence { iteration: usize, loss: f64 },
    #[error("no seed boxes in any training image")]
    NoSeedBoxes,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
