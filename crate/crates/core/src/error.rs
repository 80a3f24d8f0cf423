use numkit::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate 6D input at row {row}: `{vector}` collapsed (norm {norm:e})")]
    Singular {
        vector: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("waveform too short: {len} samples, need at least {need}")]
    Length { len: usize, need: usize },
    #[error("sequence of {len} tokens exceeds maximum {max}")]
    SequenceLength { len: usize, max: usize },
    #[error("data: {0}")]
    Data(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("{module}: {source}")]
    Context {
        module: &'static str,
        #[source]
        source: Box<CoreError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub trait ResultExt<T> {
    /// Tags an error with the module it surfaced from.
    fn within(self, module: &'static str) -> Result<T>;
}

impl<T, E: Into<CoreError>> ResultExt<T> for std::result::Result<T, E> {
    fn within(self, module: &'static str) -> Result<T> {
        self.map_err(|e| CoreError::Context {
            module,
            source: Box::new(e.into()),
        })
    }
}

impl CoreError {
    /// Strips any module context wrappers.
    pub fn root(&self) -> &CoreError {
        match self {
            CoreError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
