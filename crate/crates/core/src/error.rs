use std::path::PathBuf;

/// Errors raised by masakit operations.
///
/// Variants are split into input validation problems and numerical
/// failures so front ends can map them onto distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum MasaError {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("cholesky factorization of {name} failed even with ridge {ridge:e}")]
    Cholesky { name: String, ridge: f64 },

    #[error("NaN attention logits in block {block}")]
    NanLogits { block: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("not a MASA checkpoint")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    BadVersion(u8),

    #[error("payload short: need {needed} bytes, have {available}")]
    PayloadShort { needed: u64, available: u64 },

    #[error("tensor layout overlap or misordering at '{0}'")]
    Overlap(String),

    #[error("malformed checkpoint header: {0}")]
    Header(String),

    #[error("missing tensor '{0}'")]
    MissingTensor(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MasaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MasaError::Invalid(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MasaError::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MasaError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the caller's input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MasaError::NonFinite(_)
                | MasaError::Cholesky { .. }
                | MasaError::NanLogits { .. }
                | MasaError::Diverged { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, MasaError>;
