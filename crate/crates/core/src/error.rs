use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structural error: {0}")]
    Structure(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("stale tape: parameters changed since the forward pass (recorded version {recorded}, current {current})")]
    StaleTape { recorded: u64, current: u64 },

    #[error("non-finite gradient in {param} at flat index {index}: {value}")]
    NonFiniteGradient {
        param: String,
        index: usize,
        value: f64,
    },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("edge on line {line} references node {node}, but the graph has {n_nodes} nodes")]
    DanglingEdge {
        line: usize,
        node: usize,
        n_nodes: usize,
    },

    #[error("node {node} has label {label}, outside [0, {n_classes})")]
    LabelOutOfRange {
        node: usize,
        label: usize,
        n_classes: usize,
    },

    #[error("count mismatch for {what}: manifest declares {declared}, files contain {found}")]
    CountMismatch {
        what: &'static str,
        declared: usize,
        found: usize,
    },

    #[error("class {class} has {available} labeled nodes, split needs {required}")]
    InsufficientClass {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Structure(_) => "structure",
            Error::Validation(_) => "validation",
            Error::Dimension(_) => "dimension",
            Error::OutOfRange { .. } => "out_of_range",
            Error::StaleTape { .. } => "stale_tape",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Diverged { .. } => "diverged",
            Error::Parse { .. } => "parse",
            Error::DanglingEdge { .. } => "dangling_edge",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::InsufficientClass { .. } => "insufficient_class",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }

    /// True for failures of the numerics rather than of inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Diverged { .. } | Error::NonFiniteGradient { .. }
        )
    }

    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Io { path, .. } | Error::Json { path, .. } | Error::Parse { path, .. } => {
                Some(path)
            }
            _ => None,
        }
    }
}
