use thiserror::Error;

pub type Result<T> = std::result::Result<T, ShedError>;

#[derive(Debug, Error)]
pub enum ShedError {
    #[error("degenerate embedding: norm {norm:e} below eps {eps:e}")]
    DegenerateEmbedding { norm: f64, eps: f64 },

    #[error("empty input sequence")]
    EmptyInput,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("invalid temperature {0}: must be finite and > 0")]
    InvalidTemperature(f64),

    #[error("non-finite vector entry at index {index}")]
    NonFinite { index: usize },

    #[error("unknown domain id {0}")]
    UnknownDomain(usize),

    #[error("domain {domain} has {count} samples, at least 2 required")]
    EmptyDomain { domain: usize, count: usize },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("missing text vector for template {template:?}, class {class:?}")]
    MissingTemplateClassPair { template: String, class: String },

    #[error("unknown template {0:?}")]
    UnknownTemplate(String),

    #[error("sample pool is empty")]
    EmptyPool,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),

    #[error("non-finite loss at iteration {iteration}: align={align}, reg={reg}")]
    NonFiniteLoss { iteration: usize, align: f64, reg: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset has no samples")]
    EmptyDataset,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersionMismatch { expected: u32, found: u32 },

    #[error("sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<ShedError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ShedError {
    /// Whether the error stems from bad user input (config, files) as opposed
    /// to a failure during computation. Drives the CLI exit code.
    pub fn is_validation(&self) -> bool {
        match self {
            ShedError::InvalidConfig(_)
            | ShedError::InvalidDataset(_)
            | ShedError::Parse { .. }
            | ShedError::SchemaVersionMismatch { .. }
            | ShedError::UnknownTemplate(_)
            | ShedError::MissingTemplateClassPair { .. }
            | ShedError::EmptyDataset
            | ShedError::EmptyDomain { .. }
            | ShedError::EmptyClass(_)
            | ShedError::InvalidTemperature(_)
            | ShedError::Json(_) => true,
            ShedError::AtSample { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    pub(crate) fn at_sample(self, index: usize) -> Self {
        ShedError::AtSample {
            index,
            source: Box::new(self),
        }
    }
}
