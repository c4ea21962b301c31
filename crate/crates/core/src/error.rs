use std::path::PathBuf;

/// Errors produced anywhere in the pruning pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss ({0})")]
    NonFiniteLoss(f64),
    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),
    #[error("graph already consumed by a backward pass")]
    GraphConsumed,
    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("{path}: bad magic number {found} (expected {expected})")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: truncated file ({detail})")]
    TruncatedFile { path: PathBuf, detail: String },
    #[error("label {label} at record {index} is outside [0, {classes})")]
    BadLabel { index: usize, label: usize, classes: usize },
    #[error("class {class} has {count} samples; at least 2 are required for a stratified split")]
    ClassTooSmall { class: usize, count: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty partition: no batches to accumulate")]
    EmptyPartition,
    #[error("degenerate scores: normalizer is zero")]
    DegenerateScores,
    #[error("zero gradient: finite-difference direction undefined")]
    ZeroGradient,
    #[error("singular Fisher diagonal at index {0} (F + damping == 0)")]
    SingularFisher(usize),
    #[error("config: {0}")]
    Config(String),
    #[error("malformed results file {path}: {detail}")]
    Results { path: PathBuf, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable tag used in run status columns.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::GraphConsumed => "graph_consumed",
            Error::UnknownArchitecture(_) => "unknown_architecture",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::BadMagic { .. } => "bad_magic",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::TruncatedFile { .. } => "truncated_file",
            Error::BadLabel { .. } => "bad_label",
            Error::ClassTooSmall { .. } => "class_too_small",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyPartition => "empty_partition",
            Error::DegenerateScores => "degenerate_scores",
            Error::ZeroGradient => "zero_gradient",
            Error::SingularFisher(_) => "singular_fisher",
            Error::Config(_) => "config",
            Error::Results { .. } => "results",
            Error::Io { .. } => "io",
        }
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, actual })
    }
}
