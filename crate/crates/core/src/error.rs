use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("unsupported op: {0}")]
    UnsupportedOp(String),

    #[error("index error: {0}")]
    Index(String),

    /// A caller broke an API contract (non-scalar loss, reused tape, mutated frozen weights).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("finite-difference probe failed for parameter {param}: {detail}")]
    Probe { param: String, detail: String },

    #[error("schema error at {path}: {detail}")]
    Schema { path: String, detail: String },

    #[error("parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },

    #[error("unsupported format_version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn schema(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnsupportedOp(_) | Error::Contract(_) => 2,
            Error::Numerical(_) | Error::Probe { .. } => 4,
            Error::Dimension { .. }
            | Error::Index(_)
            | Error::Schema { .. }
            | Error::Parse { .. }
            | Error::Version { .. }
            | Error::Shape(_)
            | Error::Data(_)
            | Error::UndefinedMetric(_)
            | Error::Io(_) => 3,
        }
    }
}
