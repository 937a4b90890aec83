use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    /// A layer received an input it cannot consume. `expected` lists the
    /// constrained dimensions (0 where any size is accepted).
    #[error("{layer} expects input {expected:?}, got {actual:?}")]
    LayerInput { layer: String, expected: Vec<usize>, actual: Vec<usize> },

    #[error("layer {index}: {source}")]
    AtLayer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid layer: {0}")]
    InvalidLayer(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("parameter mismatch: {0}")]
    Params(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("bad magic in {format} stream")]
    BadMagic { format: &'static str },

    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),

    #[error("weight file does not match model: {0}")]
    WeightMismatch(String),

    #[error("truncated stream while reading {0}")]
    Truncated(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),

    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_layer(self, index: usize) -> Self {
        Error::AtLayer { index, source: Box::new(self) }
    }
}
