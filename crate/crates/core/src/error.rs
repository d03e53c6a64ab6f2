use thiserror::Error;

/// Errors produced by the analysis library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("rank error: requested {requested} components from a {rows}x{cols} matrix")]
    Rank {
        requested: usize,
        rows: usize,
        cols: usize,
    },

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("constant input: {0}")]
    ConstantInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("integrity error in layer {layer:?} field {field}: {reason}")]
    Integrity {
        layer: Option<usize>,
        field: String,
        reason: String,
    },

    #[error("missing field: trace does not contain `{0}`")]
    MissingField(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite activation at layer {layer}, position {position} ({site})")]
    Numerics {
        layer: usize,
        position: usize,
        site: &'static str,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("empty cohort: {0}")]
    EmptyCohort(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by non-finite or divergent arithmetic.
    pub fn is_numerics(&self) -> bool {
        matches!(self, Error::Numerics { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
