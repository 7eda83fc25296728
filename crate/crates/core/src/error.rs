use thiserror::Error;

use crate::tape::SavedKind;
use crate::tensor::{Shape, TensorId};

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),

    #[error("buffer of length {len} does not fit shape {shape}")]
    BufferLength { len: usize, shape: Shape },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("tensor {0} was never registered on this tape")]
    UnknownTensor(TensorId),

    #[error("tensor {0} is already registered on this tape")]
    DuplicateTensor(TensorId),

    #[error("backward of node {node} ({op}) needs saved value `{kind}` that the storage policy did not keep")]
    MissingSavedValue {
        node: usize,
        op: &'static str,
        kind: SavedKind,
    },

    #[error("loss tensor {0} must be a single element")]
    LossNotScalar(TensorId),

    #[error("loss tensor {0} does not require grad")]
    LossNotDifferentiable(TensorId),

    #[error("tensor {id} released while {holders} other handles still alive")]
    LifetimeMismatch { id: TensorId, holders: usize },

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("unknown network `{0}`")]
    UnknownNet(String),

    #[error("shape propagation failed at layer {layer}: {detail}")]
    ShapePropagation { layer: usize, detail: String },

    #[error("network is declared {declared} but was executed as {requested}")]
    DtypeMismatch {
        declared: crate::Dtype,
        requested: crate::Dtype,
    },

    #[error("plan/execution disagreement: {0}")]
    OracleMismatch(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
