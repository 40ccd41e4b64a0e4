use std::path::PathBuf;

use crate::cluster::GpuId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("empty catalog")]
    EmptyCatalog,

    #[error("line {line}: duplicate model id `{model_id}`")]
    DuplicateModel { line: u64, model_id: String },

    #[error("line {line}: field `{field}` must be positive, got {value}")]
    NonPositive {
        line: u64,
        field: &'static str,
        value: String,
    },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("line {line}: negative invocation count {value} for `{function}`")]
    NegativeCount {
        line: u64,
        function: String,
        value: i64,
    },

    #[error("working set of {requested} exceeds the {available} functions in the trace")]
    WorkingSetTooLarge { requested: usize, available: usize },

    #[error("trace has {available} minutes but {requested} were requested")]
    TraceTooShort { requested: usize, available: usize },

    #[error("minute {minute} has zero invocations across the working set")]
    ZeroInvocations { minute: usize },

    #[error("function `{0}` has no model mapping")]
    UnmappedFunction(String),

    #[error("model `{model_id}` needs {occupation_mb} MB, which cannot fit on any configuration of a {capacity_mb} MB GPU")]
    ModelTooLarge {
        model_id: String,
        occupation_mb: u64,
        capacity_mb: u64,
    },

    #[error("model `{model_id}` is not cached on GPU {gpu}")]
    NotCached { gpu: GpuId, model_id: String },

    #[error("GPU {gpu} has {free_mb} MB free but `{model_id}` needs {needed_mb} MB")]
    InsufficientSpace {
        gpu: GpuId,
        model_id: String,
        free_mb: u64,
        needed_mb: u64,
    },

    #[error("GPU {0} is idle")]
    GpuIdle(GpuId),

    #[error("GPU {0} is busy")]
    GpuBusy(GpuId),

    #[error("unknown request {0}")]
    UnknownRequest(u64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that indicate a simulator bug rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(
            self,
            Error::Invariant(_)
                | Error::NotCached { .. }
                | Error::InsufficientSpace { .. }
                | Error::GpuIdle(_)
                | Error::GpuBusy(_)
                | Error::UnknownRequest(_)
        )
    }
}
