use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("cache contract violated: {0}")]
    Contract(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("capacity exceeded: {requested} tokens requested, max_seq is {max_seq}")]
    Capacity { requested: usize, max_seq: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("cosine similarity undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("cannot normalize cumulative variance: all-zero column for heads {heads:?}")]
    Normalization { heads: Vec<usize> },

    #[error("weight file format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Plan(_) => "plan",
            Error::Sequencing(_) => "sequencing",
            Error::Contract(_) => "contract",
            Error::Input(_) => "input",
            Error::Capacity { .. } => "capacity",
            Error::Domain(_) => "domain",
            Error::UndefinedSimilarity => "undefined_similarity",
            Error::Normalization { .. } => "normalization",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
