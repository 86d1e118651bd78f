use std::path::PathBuf;

use thiserror::Error;

use crate::ir::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}:{column}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("malformed weight container: {0}")]
    Container(String),

    #[error("invalid graph: {}", format_diagnostics(.0))]
    Validation(Vec<Diagnostic>),

    #[error("shape error at node `{node}`: {msg}")]
    Shape { node: String, msg: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("quantization error: {0}")]
    Quant(String),

    #[error("execution error at node `{node}`: {msg}")]
    Exec { node: String, msg: String },

    #[error("{0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(node: &str, msg: impl Into<String>) -> Self {
        Error::Shape {
            node: node.to_string(),
            msg: msg.into(),
        }
    }

    pub(crate) fn exec(node: &str, msg: impl Into<String>) -> Self {
        Error::Exec {
            node: node.to_string(),
            msg: msg.into(),
        }
    }
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
