use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("shape mismatch at node {node} ({op}): {detail}")]
    NodeShape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("unbound input `{0}`")]
    UnboundInput(String),

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("gradient check needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("ode solver exceeded its budget of {max_steps} steps at t = {t}")]
    MaxStepsExceeded { max_steps: usize, t: f64 },

    #[error("non-finite dynamics output at t = {t}, entry {index} = {value}")]
    NonFiniteDynamics { t: f64, index: usize, value: f64 },

    #[error("invalid solver config: {0}")]
    SolverConfig(String),

    #[error("trace budget exceeded: n*d = {size} exceeds cap {cap}")]
    TraceBudget { size: usize, cap: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at epoch {epoch} (lr = {lr}): {detail}")]
    NonFiniteLoss {
        epoch: usize,
        lr: f64,
        detail: String,
    },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
