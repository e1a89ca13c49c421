use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library reports.
///
/// The CLI maps [`Error::Usage`] to exit code 1 and everything else to 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail} (operands {shapes:?})")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{}: parse error at byte offset {offset}: {detail}", path.display())]
    Parse { path: PathBuf, offset: u64, detail: String },

    #[error("checkpoint does not match the architecture:\n{}", format_mismatches(.0))]
    ArchitectureMismatch(Vec<TensorMismatch>),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One disagreement between a checkpoint and the expected parameter layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorMismatch {
    pub name: String,
    pub expected: Option<Vec<usize>>,
    pub found: Option<Vec<usize>>,
}

fn format_mismatches(items: &[TensorMismatch]) -> String {
    items
        .iter()
        .map(|m| {
            let show = |s: &Option<Vec<usize>>| match s {
                Some(dims) => format!("{dims:?}"),
                None => "absent".to_string(),
            };
            format!("  {}: expected {}, found {}", m.name, show(&m.expected), show(&m.found))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]], detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
