//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum MfnError {
    /// Two operands with incompatible shapes.
    #[error("{op}: incompatible shapes {lhs_rows}x{lhs_cols} and {rhs_rows}x{rhs_cols}")]
    Dim {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// A caller violated an operation's contract (non-scalar loss, row sums
    /// off, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An id fell outside its vocabulary.
    #[error("lookup failed: field `{field}` has no id {id} (vocabulary size {vocab})")]
    Lookup {
        field: &'static str,
        id: u32,
        vocab: usize,
    },

    /// A text artifact (embedding file, config, checkpoint, dataset) failed to
    /// parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or insufficient input data.
    #[error("data error: {0}")]
    Data(String),

    /// A metric is undefined for the given inputs.
    #[error("metric undefined: {0}")]
    Metric(String),

    /// The gradient checker observed two differing baseline evaluations.
    #[error("non-deterministic forward: two evaluations of the same point differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    /// File-system failure, with the offending path.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl MfnError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        MfnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        MfnError::Parse {
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, MfnError>;
