use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: image {height}x{width} is smaller than the minimum {min}x{min}")]
    TooSmall {
        op: &'static str,
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("{op}: {requested} scales requested but at most {feasible} fit a {height}x{width} image")]
    TooFewScales {
        op: &'static str,
        requested: usize,
        feasible: usize,
        height: usize,
        width: usize,
    },

    #[error("{op}: spatial dims {height}x{width} must be divisible by {divisor}")]
    Indivisible {
        op: &'static str,
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("{op}: {channels} channels not divisible by r^2 with r = {factor}")]
    ChannelsIndivisible {
        op: &'static str,
        channels: usize,
        factor: usize,
    },

    #[error("style code for level {level} has width {got}, features have {expected} channels")]
    StyleWidth {
        level: usize,
        expected: usize,
        got: usize,
    },

    #[error("level {level} out of range 1..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("non-finite value in term `{term}`{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { term: String, step: Option<u64> },

    #[error("discriminator produced a non-finite score for sample {index}")]
    NonFiniteScore { index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: expected {expected}, found {found}")]
    Dimensions {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

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

    /// Stable short name of the variant, used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::TooSmall { .. } => "too_small",
            Error::TooFewScales { .. } => "too_few_scales",
            Error::Indivisible { .. } => "indivisible",
            Error::ChannelsIndivisible { .. } => "channels_indivisible",
            Error::StyleWidth { .. } => "style_width",
            Error::LevelOutOfRange { .. } => "level_out_of_range",
            Error::NonFinite { .. } => "non_finite",
            Error::NonFiniteScore { .. } => "non_finite_score",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Dimensions { .. } => "dimensions",
            Error::EmptyDataset => "empty_dataset",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}
