use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("track file line {line}: {message}")]
    TrackRow { line: u64, message: String },

    #[error("track file is missing required column `{0}`")]
    MissingColumn(String),

    #[error("duplicate record for track {track_id} frame {frame}")]
    DuplicateFrame { track_id: u64, frame: i64 },

    #[error("track {track_id} has non-contiguous frames ({prev} followed by {next})")]
    FrameGap { track_id: u64, prev: i64, next: i64 },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint horizon {found} does not match requested horizon {expected}")]
    HorizonMismatch { expected: usize, found: usize },

    #[error("dataset format error: {0}")]
    Dataset(String),

    #[error("mpc solver produced a non-finite cost at iteration {iteration} (last finite cost {last_cost:e})")]
    MpcDiverged { iteration: usize, last_cost: f64 },

    #[error("cannot place {requested} vehicles on arm {arm} while respecting a {headway} m headway")]
    InfeasibleSpawn {
        arm: String,
        requested: usize,
        headway: f64,
    },

    #[error("expert episode {episode} could not be generated collision-free after {attempts} attempts: {detail}")]
    ExpertCollision {
        episode: usize,
        attempts: usize,
        detail: String,
    },

    #[error("non-finite loss on scene {scene}")]
    NonFiniteLoss { scene: usize },

    #[error("non-finite prediction: {0}")]
    NonFinitePrediction(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
