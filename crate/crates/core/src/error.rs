use thiserror::Error;

use crate::ClassId;

pub type Result<T, E = FlowerError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FlowerError {
    #[error("shape mismatch at `{node}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        node: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("class {0} has no samples")]
    EmptyClass(ClassId),

    #[error("class {0} is not in the prototype table")]
    UnknownClass(ClassId),

    #[error("class {0} already present in the prototype table")]
    DuplicateClass(ClassId),

    #[error("classes {0:?} were already seen in an earlier task")]
    ClassOverlap(Vec<ClassId>),

    #[error("probability vector does not sum to one (sum = {0})")]
    NotNormalized(f64),

    #[error("no parameter snapshot exists; run the base phase first")]
    MissingSnapshot,

    #[error("could not draw a nonzero direction after {0} attempts")]
    DegenerateDirection(usize),

    #[error("training diverged at epoch {epoch}, trial {trial}: loss = {loss}")]
    Diverged { epoch: usize, trial: usize, loss: f64 },

    #[error("line {line}: {msg}")]
    Csv { line: u64, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
