use std::path::PathBuf;

use thiserror::Error;

use crate::task::TaskId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("feature width mismatch: {left} vs {right}")]
    WidthMismatch { left: usize, right: usize },

    #[error("row index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },

    #[error("task {0} is not configured for this operation")]
    UnknownTask(TaskId),

    #[error("unknown task name `{0}`")]
    UnknownTaskName(String),

    #[error("retrieval sampling needs at least 2 classes and a class with 2 samples")]
    InsufficientClasses,

    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty reference sequence")]
    EmptyReference,

    #[error("degenerate gallery: {0}")]
    DegenerateGallery(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("missing {0} split")]
    MissingSplit(String),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("corrupted stream: {0}")]
    CorruptedStream(String),

    #[error("singular channel matrix")]
    SingularChannel,

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("need at least two enabled tasks, got {0}")]
    TooFewTasks(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("container format: {0}")]
    Format(String),

    #[error("output {} already exists (use --force to overwrite)", .0.display())]
    OutputExists(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::WidthMismatch { .. } => "width_mismatch",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::UnknownTask(_) | Error::UnknownTaskName(_) => "unknown_task",
            Error::InsufficientClasses => "insufficient_classes",
            Error::InvalidLabel { .. } => "invalid_label",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::EmptyReference => "empty_reference",
            Error::DegenerateGallery(_) => "degenerate_gallery",
            Error::MissingFile(_) => "missing_file",
            Error::MissingSplit(_) => "missing_split",
            Error::Malformed(_) => "malformed_data",
            Error::CorruptedStream(_) => "corrupted_stream",
            Error::SingularChannel => "singular_channel",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::TooFewTasks(_) => "too_few_tasks",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::OutputExists(_) => "output_exists",
            Error::Io(_) => "io",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
