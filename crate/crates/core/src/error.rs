use thiserror::Error;

pub type Result<T, E = ArithError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ArithError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value encountered in {0}")]
    Numeric(&'static str),
    #[error("index {index} out of range (limit {limit}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("operand {value} outside domain 0..{limit}")]
    Domain { value: u64, limit: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("layer {index} out of range (model has {count})")]
    LayerRange { index: usize, count: usize },
    #[error("correlation undefined: zero variance in {0}")]
    UndefinedCorrelation(&'static str),
    #[error("ill-conditioned system: {0}")]
    Conditioning(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
