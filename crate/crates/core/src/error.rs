use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid point: {0}")]
    InvalidPoint(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("point at or beyond the cut locus of the chart pole (distance {distance:.6})")]
    CutLocus { distance: f64 },
    #[error("chart-domain error{}: {msg}", layer.map(|l| format!(" in layer {l}")).unwrap_or_default())]
    ChartDomain { layer: Option<usize>, msg: String },
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("extent {extent} is not divisible by {divisor}")]
    Divisibility { extent: usize, divisor: usize },
    #[error("channel count {0} is odd")]
    OddChannels(usize),
    #[error("degenerate batch: coordinate {coord} has standard deviation {std:e}")]
    DegenerateBatch { coord: usize, std: f64 },
    #[error("singular covariance (determinant {0:e})")]
    SingularCovariance(f64),
    #[error("rejection sampling exhausted after {0} draws")]
    RejectionExhausted(usize),
    #[error("singular jacobian")]
    SingularJacobian,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("stale tape: network parameters changed since the forward pass")]
    StaleTape,
    #[error("numerical abort: {0}")]
    NumericalAbort(String),
    #[error("degenerate group: {0} members (need at least 2)")]
    DegenerateGroup(usize),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("format error at byte {pos}: {msg}")]
    Format { pos: usize, msg: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("checksum mismatch")]
    Checksum,
    #[error("invalid config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { key: key.into(), msg: msg.into() }
    }

    /// Attaches a layer index to chart-domain errors.
    pub(crate) fn at_layer(self, index: usize) -> Self {
        match self {
            Error::ChartDomain { layer: None, msg } => Error::ChartDomain { layer: Some(index), msg },
            other => other,
        }
    }
}
