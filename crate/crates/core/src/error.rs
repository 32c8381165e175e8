use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch at record {record}: expected {expected} values, found {found}")]
    DimensionMismatch {
        record: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at record {record}, component {component}")]
    NonFinite { record: usize, component: usize },

    #[error("label {label} out of range at record {record} (num_classes = {num_classes})")]
    LabelOutOfRange {
        record: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("truncated file at record {record}")]
    Truncated { record: usize },

    #[error("csv parse error at record {record}: {message}")]
    Csv { record: usize, message: String },

    #[error("invalid embedding set: {0}")]
    InvalidSet(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} has {found} items, need at least {required}")]
    ClassTooSmall {
        class: usize,
        found: usize,
        required: usize,
    },

    #[error("graph too small: {0} node(s)")]
    GraphTooSmall(usize),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("power iteration did not converge within {iterations} iterations (last change {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("node {node} is already in module {module}")]
    AlreadyInModule { node: usize, module: usize },

    #[error("fixture mean placement failed after {0} attempts")]
    FixturePlacement(usize),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("evaluation error: {0}")]
    Metric(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed in run {run}")]
    Stage {
        stage: &'static str,
        run: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str, run: usize) -> Self {
        Error::Stage {
            stage,
            run,
            source: Box::new(self),
        }
    }
}
