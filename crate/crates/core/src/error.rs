use thiserror::Error;

pub type Result<T> = std::result::Result<T, PmlError>;

#[derive(Debug, Error)]
pub enum PmlError {
    #[error("level {level} exceeds the supported maximum {max}")]
    LevelTooLarge { level: usize, max: usize },

    #[error("map at level {level} needs {expected} values, got {found}")]
    DataLength {
        level: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("negative ground-truth density {value} at index {index}")]
    NegativeDensity { index: usize, value: f64 },

    #[error("cannot resample level {from} to level {to}")]
    LevelOrder { from: usize, to: usize },

    #[error("level mismatch: expected {expected}, found {found}")]
    LevelMismatch { expected: usize, found: usize },

    #[error("point {index} at ({x}, {y}) lies outside the scene [0, {scene_size})")]
    PointOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        scene_size: f64,
    },

    #[error("scene size must be positive and finite, got {0}")]
    InvalidSceneSize(f64),

    #[error("empty batch")]
    EmptyBatch,

    #[error("batch length mismatch: {preds} predictions vs {gts} ground truths")]
    BatchLength { preds: usize, gts: usize },

    #[error("invalid resolution set: {0}")]
    InvalidResolutionSet(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate variance for sigma index {index}: loss value {value} is not positive")]
    DegenerateVariance { index: usize, value: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged {
        step: usize,
        loss: f64,
        /// Parameter vector at the failing step.
        parameters: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl PmlError {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        PmlError::Parse {
            line,
            message: message.into(),
        }
    }
}
