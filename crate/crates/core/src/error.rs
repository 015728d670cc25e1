use crate::nn::NnError;

/// Errors raised by the codec library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("coefficient {value} at band {band} is outside the coder alphabet")]
    RangeOverflow { band: usize, value: f64 },
    #[error("decode order violated: {0}")]
    Sequencing(String),
    #[error("bitstream truncated")]
    Truncated,
    #[error("corrupt bitstream: {0}")]
    Corrupt(String),
    #[error("payload checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("model fingerprint does not match the one recorded in the bitstream")]
    ModelMismatch,
    #[error("malformed model file: {0}")]
    ModelFormat(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("image error: {0}")]
    Image(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    /// True for problems with the input data rather than with the model.
    pub fn is_model_mismatch(&self) -> bool {
        matches!(self, Error::ModelMismatch | Error::ModelFormat(_))
    }
}
