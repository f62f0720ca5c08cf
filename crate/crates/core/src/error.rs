use thiserror::Error;

pub type Result<T, E = IsaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IsaError {
    /// Shapes or block layouts that do not fit together.
    #[error("layout error: {0}")]
    Layout(String),

    /// Non-finite or otherwise unusable input values.
    #[error("input error: {0}")]
    Input(String),

    #[error("index {index} out of range (limit {limit})")]
    Index { index: usize, limit: usize },

    /// A caller broke an operation's precondition (unsorted lists, overlapping scatters, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    /// Every key of a query row was masked out.
    #[error("degenerate row: query row {row} of head ({batch}, {head}) has no valid key")]
    DegenerateRow { batch: usize, head: usize, row: usize },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IsaError {
    pub(crate) fn layout(msg: impl Into<String>) -> Self {
        IsaError::Layout(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        IsaError::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        IsaError::Config(msg.into())
    }
}
