use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("layout: {0}")]
    Layout(String),
    #[error("memory: {0}")]
    Memory(String),
    #[error("bad magic bytes in {0}")]
    BadMagic(String),
    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { found: u8, expected: u8 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("truncated or malformed file: {0}")]
    Malformed(String),
    #[error("parameter shape mismatch: {0}")]
    ParamShape(String),
    #[error("{path}:{line}: {msg}")]
    DatasetLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("protocol {protocol} is not supported by a {kind} model")]
    ProtocolMismatch { protocol: String, kind: String },
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("empty session: no memory and no recent items")]
    EmptySession,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Parses a unit enum variant from its serialized (lower or kebab case) name.
pub(crate) fn parse_variant<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown {what} `{s}`")))
}
