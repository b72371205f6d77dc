use crate::data::DataError;
use crate::numkernel::KernelError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlatError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("generated block {block} has degenerate norm {norm:e}")]
    DegenerateWeights { block: String, norm: f64 },
    #[error("{what}: expected {expected}, found {found}")]
    Dimension { what: &'static str, expected: usize, found: usize },
    #[error("weight norm must be positive, got {0}")]
    InvalidTheta(f64),
    #[error("task has {0} column(s); at least 2 are required")]
    TooFewColumns(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no dataset can supply {n_meta} meta + {n_target} target rows")]
    NoUsableDatasets { n_meta: usize, n_target: usize },
    #[error("evaluation: {0}")]
    Eval(String),
}

pub type Result<T, E = FlatError> = std::result::Result<T, E>;
