use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LobsError>;

#[derive(Debug, Error)]
pub enum LobsError {
    #[error("dimension mismatch at layer {layer}: {detail}")]
    Dimension { layer: usize, detail: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Divergence { iteration: usize, loss: f64 },

    #[error("numerical instability in recursive inverse at step {step}: denominator {denominator:e}")]
    NumericalInstability { step: usize, denominator: f64 },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("layer {layer} has no prunable parameters left")]
    Exhausted { layer: usize },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("topology mismatch: {0}")]
    Topology(String),

    #[error("degenerate quantity: {0}")]
    Degenerate(String),

    #[error("replay error: {0}")]
    Replay(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{phase} phase failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<LobsError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LobsError {
    pub(crate) fn dim(layer: usize, detail: impl Into<String>) -> Self {
        LobsError::Dimension {
            layer,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LobsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the pipeline phase it came from.
    pub fn in_phase(self, phase: &'static str) -> Self {
        LobsError::Phase {
            phase,
            source: Box::new(self),
        }
    }
}
