use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no annotation points")]
    NoPoints,

    #[error("point #{index} ({x}, {y}) lies outside the {width}x{height} frame")]
    PointOutOfFrame {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("degenerate heatmap: {0}")]
    DegenerateHeatmap(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("box has zero area after clipping to the frame")]
    EmptyBox,

    #[error("mask degenerate: enlarged hand mask covers the whole frame")]
    MaskDegenerate,

    #[error("no interaction frame in clip starting at {0}")]
    NoInteractionFrame(usize),

    #[error("could not draw a non-degenerate homography after {0} attempts")]
    DegenerateHomography(usize),

    #[error("no minable interaction clips")]
    NoClips,

    #[error("action head absent")]
    ActionHeadAbsent,

    #[error("action label {label} outside 1..={classes}")]
    ActionLabel { label: usize, classes: usize },

    #[error("training diverged at iteration {iteration} (loss {loss})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
