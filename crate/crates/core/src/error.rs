use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("shape conflict at node `{node}`: expected {expected:?}, found {found:?}")]
    ShapeConflict {
        node: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("dataset error: {0}")]
    Dataset(String),
}

impl Error {
    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Error::InvalidGeometry(msg.into())
    }
}
