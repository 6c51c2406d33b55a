use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("model evaluation produced a non-finite value at t={t}, x={x:?}")]
    ModelEvaluation { t: f64, x: Vec<f64> },

    #[error("non-finite value evaluating at atom {index}")]
    Evaluation { index: usize },

    #[error("simulation diverged at step {step}, particle {particle}{}", replication.map(|r| format!(", replication {r}")).unwrap_or_default())]
    Divergence {
        step: usize,
        particle: usize,
        replication: Option<u32>,
    },

    #[error("diffusion matrix is singular at t={t}, x={x:?}")]
    SingularDiffusion { t: f64, x: Vec<f64> },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Attach the replication index to a divergence raised inside a replication.
    pub(crate) fn in_replication(self, replication: u32) -> Self {
        match self {
            Error::Divergence { step, particle, .. } => Error::Divergence {
                step,
                particle,
                replication: Some(replication),
            },
            other => other,
        }
    }
}
