//! Error type shared by every module of the laboratory.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {op} at node {node}")]
    Numerical { op: &'static str, node: usize },
    #[error("tape is stale: parameter store was mutated after recording")]
    StaleTape,
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("unknown token `{0}`")]
    Token(String),
    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f64 },
    #[error("budget constraint not met: worst violation {violation:.3e}")]
    ConstraintNotMet {
        violation: f64,
        best: Box<crate::unlearn::CraftOutput>,
    },
    #[error("operation requires {expected} data, got {got}")]
    Mode {
        expected: &'static str,
        got: &'static str,
    },
    #[error("insufficient data: need at least {need} points, got {got}")]
    InsufficientData { need: usize, got: usize },
    #[error("no clean baseline for identity {0}")]
    BaselineMissing(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("run stopped after {0} new units; rerun to resume")]
    Interrupted(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Token(_) | Error::Mode { .. } => 2,
            Error::Numerical { .. }
            | Error::TrainingDiverged { .. }
            | Error::ConstraintNotMet { .. } => 3,
            _ => 1,
        }
    }
}
