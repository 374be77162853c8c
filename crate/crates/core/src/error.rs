use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum MctError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("row {row} is not stochastic (sum {sum}, min {min})")]
    NotStochastic { row: usize, sum: f64, min: f64 },

    #[error("filtering degenerate at position {position}: token {token} has zero predictive mass")]
    FilterDegenerate { position: usize, token: usize },

    #[error("input error: {0}")]
    Input(String),

    #[error("alignment requires M == K (got M={m}, K={k})")]
    UnsupportedAlignment { m: usize, k: usize },

    #[error("missing alignment: {0}")]
    MissingAlignment(&'static str),

    #[error("cannot build forcing condition: {0}")]
    Condition(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("singular normal equations; increase lambda (lambda={0})")]
    Singular(f64),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MctError>;

pub(crate) fn param_err(msg: impl Into<String>) -> MctError {
    MctError::Parameter(msg.into())
}
