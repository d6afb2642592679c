use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// The `kind()` tag is stable and is what the CLI prints in front of the
/// message, so scripts can match on it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("composition error: {0}")]
    Composition(String),

    #[error("degenerate mask: kept experts carry no gate mass")]
    DegenerateMask,

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("format error in {context}: {detail}")]
    Format { context: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::NonFinite { .. } => "numeric",
            Error::Contract(_) => "contract",
            Error::Input(_) => "input",
            Error::Composition(_) => "composition",
            Error::DegenerateMask => "degenerate-mask",
            Error::Divergence { .. } => "divergence",
            Error::Format { .. } => "format",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn format(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
