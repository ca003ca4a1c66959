use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: argument outside domain at index {index}")]
    Domain { op: &'static str, index: usize },
    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("singular matrix (|det| = {det:e})")]
    Singular { det: f64 },
    #[error("actnorm scale is zero in channel {channel}")]
    ZeroScale { channel: usize },
    #[error("actnorm layers are not initialized")]
    Uninitialized,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not connected to any trainable tensor")]
    DisconnectedLoss,
    #[error("flow step {index} ({kind}): {source}")]
    Step {
        index: usize,
        kind: &'static str,
        source: Box<Error>,
    },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
}

impl Error {
    pub(crate) fn at_step(self, index: usize, kind: &'static str) -> Self {
        Error::Step {
            index,
            kind,
            source: Box::new(self),
        }
    }

    pub(crate) fn arg(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    /// True when the error (or the error it wraps) is a numerical failure.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. }
            | Error::Domain { .. }
            | Error::Singular { .. }
            | Error::ZeroScale { .. } => true,
            Error::Step { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
