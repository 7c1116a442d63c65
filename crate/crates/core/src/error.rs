use thiserror::Error;

/// Errors raised by kernel construction, convolution and the training/diagnostic tooling.
#[derive(Debug, Error)]
pub enum DclsError {
    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("coordinate {value} on axis {axis} is outside [0, {upper}]")]
    Domain { axis: usize, value: f64, upper: f64 },

    #[error(
        "position {value} on axis {axis} (element {element}) is outside [{lower}, {upper}]; clamp positions before construction"
    )]
    PositionOutOfBounds {
        axis: usize,
        element: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("convolution geometry error on axis {axis}: {reason}")]
    Geometry { axis: usize, reason: String },

    #[error("stale or mismatched context: {0}")]
    StaleContext(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parameter `{0}` is neither a weight nor a position")]
    UnclassifiedParameter(String),

    #[error("sync group is missing gradients from members {0:?}")]
    MissingGradients(Vec<usize>),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("model file format error: {0}")]
    Format(String),

    #[error("model file version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DclsError> = std::result::Result<T, E>;
