use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("softmax row {row} has no visible entries")]
    DegenerateRow { row: usize },

    #[error("cannot normalize a zero-norm vector")]
    DegenerateVector,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no cache entry for timestep {t}, layer {layer}, image {image}")]
    MissingEntry { t: usize, layer: usize, image: usize },

    #[error("cache entry for timestep {t}, layer {layer}, image {image} already recorded")]
    DuplicateEntry { t: usize, layer: usize, image: usize },

    #[error("invariant violation in {module} at timestep {t}, layer {layer}: {detail}")]
    Invariant {
        module: &'static str,
        t: usize,
        layer: usize,
        detail: String,
    },

    #[error("hook failed at timestep {t}, layer {layer}: {detail}")]
    Hook { t: usize, layer: usize, detail: String },

    #[error("malformed tensor dump: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
