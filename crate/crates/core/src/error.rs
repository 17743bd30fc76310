use std::path::PathBuf;

/// Errors raised anywhere in the training engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("solver error after {iters} iterations: {message}")]
    Solver {
        message: String,
        iters: usize,
        /// Last finite iterate, flattened.
        iterate: Vec<f64>,
    },
    #[error("gradient oracle error: {0}")]
    Oracle(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("memory accounting error: {0}")]
    Accounting(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

impl Error {
    /// Prefixes the message with `ctx`, keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Error {
        match self {
            Error::Input(m) => Error::Input(format!("{ctx}: {m}")),
            Error::Shape { op, detail } => Error::Shape { op, detail: format!("{ctx}: {detail}") },
            Error::Precondition(m) => Error::Precondition(format!("{ctx}: {m}")),
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            Error::Solver { message, iters, iterate } => Error::Solver {
                message: format!("{ctx}: {message}"),
                iters,
                iterate,
            },
            Error::Oracle(m) => Error::Oracle(format!("{ctx}: {m}")),
            Error::Metric(m) => Error::Metric(format!("{ctx}: {m}")),
            Error::Accounting(m) => Error::Accounting(format!("{ctx}: {m}")),
            Error::NonFinite(m) => Error::NonFinite(format!("{ctx}: {m}")),
            Error::Checkpoint(m) => Error::Checkpoint(format!("{ctx}: {m}")),
            other @ (Error::Parse { .. } | Error::Io(_)) => other,
        }
    }
}
