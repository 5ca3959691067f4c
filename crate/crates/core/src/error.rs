use thiserror::Error;

pub type Result<T, E = IqtError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IqtError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("non-finite gradient in parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl IqtError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        IqtError::Argument(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        IqtError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
