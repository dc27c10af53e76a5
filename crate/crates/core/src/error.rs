use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("diffusion step {n} out of range 1..={max}")]
    StepOutOfRange { n: usize, max: usize },
    #[error("non-finite training loss at step {step}: n={n}, |x0|={x_norm:.4e}, weight={weight:.4e}")]
    NonFiniteLoss {
        step: u64,
        n: usize,
        x_norm: f64,
        weight: f64,
    },
    #[error("non-finite sample at diffusion step {0}")]
    NonFiniteSample(usize),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
